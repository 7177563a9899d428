/**
 * Boundary layer exposing key/value rearrangement and rearranged attention
 * to JS/TS hosts. All numerics run in the primary package; matrices cross
 * the boundary as QALN files and results come back bit-exact. The
 * low-level `invokeCli` core returns status codes; the `ffi*` wrappers
 * are idiomatic and throw, preserving primary error names (for example
 * "ShapeMismatch") in the message.
 *
 * Inputs stay caller-owned and are never mutated; outputs are freshly
 * allocated per call. Calls are reentrant: each uses its own temp
 * directory and child process.
 */

import { spawnSync } from "node:child_process";
import { mkdtempSync, readFileSync, rmSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";

import { decodeTensor, encodeMatrix } from "./tensorfile";

/** Contiguous row-major float32 matrix with explicit shape metadata. */
export interface BoundaryArray {
  data: Float32Array;
  rows: number;
  cols: number;
}

export class BoundaryValidationError extends Error {}

export class PrimaryError extends Error {
  constructor(
    message: string,
    readonly status: number,
    readonly stderr: string,
  ) {
    super(message);
  }
}

export function validateBoundary(name: string, arr: BoundaryArray): void {
  if (!(arr.data instanceof Float32Array)) {
    throw new BoundaryValidationError(`${name}: data must be a Float32Array`);
  }
  if (!Number.isInteger(arr.rows) || !Number.isInteger(arr.cols) || arr.rows < 1 || arr.cols < 1) {
    throw new BoundaryValidationError(
      `${name}: shape (${arr.rows}, ${arr.cols}) must be positive integers`,
    );
  }
  if (arr.data.length !== arr.rows * arr.cols) {
    throw new BoundaryValidationError(
      `${name}: buffer holds ${arr.data.length} values but shape ` +
        `(${arr.rows}, ${arr.cols}) needs ${arr.rows * arr.cols}; ` +
        `input is not a contiguous row-major matrix`,
    );
  }
}

export interface CliResult {
  status: number;
  stdout: string;
  stderr: string;
}

function cliCommand(): string[] {
  const override = process.env.QALIGN_CLI;
  if (override && override.trim()) {
    return override.trim().split(/\s+/);
  }
  return ["python3", "-m", "qalign"];
}

/** Status-code core: runs one primary CLI command without throwing. */
export function invokeCli(args: string[]): CliResult {
  const [cmd, ...base] = cliCommand();
  const proc = spawnSync(cmd, [...base, ...args], { encoding: "utf-8" });
  if (proc.error) {
    return { status: -1, stdout: "", stderr: String(proc.error) };
  }
  return {
    status: proc.status ?? -1,
    stdout: proc.stdout ?? "",
    stderr: proc.stderr ?? "",
  };
}

function runCli(args: string[]): void {
  const result = invokeCli(args);
  if (result.status !== 0) {
    throw new PrimaryError(
      `qalign exited with status ${result.status}: ${result.stderr.trim()}`,
      result.status,
      result.stderr,
    );
  }
}

function withTempDir<T>(fn: (dir: string) => T): T {
  const dir = mkdtempSync(join(tmpdir(), "qalign-ffi-"));
  try {
    return fn(dir);
  } finally {
    rmSync(dir, { recursive: true, force: true });
  }
}

function writeInput(dir: string, name: string, arr: BoundaryArray): string {
  const path = join(dir, name);
  writeFileSync(path, encodeMatrix(arr.data, arr.rows, arr.cols));
  return path;
}

function readOutput(path: string): BoundaryArray {
  const decoded = decodeTensor(readFileSync(path));
  return { data: decoded.data, rows: decoded.rows, cols: decoded.cols };
}

export interface RearrangedKV {
  kStar: BoundaryArray;
  vStar: BoundaryArray;
}

/**
 * Query-query alignment, top-k aggregation (with fallback and
 * reweighting), and key/value rearrangement in one call.
 */
export function ffiRearrange(
  qApp: BoundaryArray,
  qStr: BoundaryArray,
  kApp: BoundaryArray,
  vApp: BoundaryArray,
  k = 1,
): RearrangedKV {
  validateBoundary("qApp", qApp);
  validateBoundary("qStr", qStr);
  validateBoundary("kApp", kApp);
  validateBoundary("vApp", vApp);
  if (!Number.isInteger(k) || k < 1) {
    throw new BoundaryValidationError(`k must be a positive integer, got ${k}`);
  }
  return withTempDir((dir) => {
    const qa = writeInput(dir, "q_app.qaln", qApp);
    const qs = writeInput(dir, "q_str.qaln", qStr);
    const ka = writeInput(dir, "k_app.qaln", kApp);
    const va = writeInput(dir, "v_app.qaln", vApp);
    const outK = join(dir, "k_star.qaln");
    const outV = join(dir, "v_star.qaln");
    runCli([
      "rearrange", "--q-app", qa, "--q-str", qs, "-k", String(k),
      "--key", ka, "--value", va, "--out-key", outK, "--out-value", outV,
    ]);
    return { kStar: readOutput(outK), vStar: readOutput(outV) };
  });
}

/** Scaled-dot-product attention of the output queries over rearranged K/V. */
export function ffiRearrangedAttention(
  qOut: BoundaryArray,
  kStar: BoundaryArray,
  vStar: BoundaryArray,
  contrast = 1.0,
): BoundaryArray {
  validateBoundary("qOut", qOut);
  validateBoundary("kStar", kStar);
  validateBoundary("vStar", vStar);
  if (!(contrast > 0) || !Number.isFinite(contrast)) {
    throw new BoundaryValidationError(`contrast must be a positive real, got ${contrast}`);
  }
  return withTempDir((dir) => {
    const q = writeInput(dir, "q_out.qaln", qOut);
    const ks = writeInput(dir, "k_star.qaln", kStar);
    const vs = writeInput(dir, "v_star.qaln", vStar);
    const out = join(dir, "out.qaln");
    runCli([
      "attend", "--query", q, "--key", ks, "--value", vs,
      "--contrast", String(contrast), "--out", out,
    ]);
    return readOutput(out);
  });
}
