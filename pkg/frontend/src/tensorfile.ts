/**
 * QALN tensor file codec (little-endian, byte-exact with the Python side).
 *
 * Layout: magic "QALN", uint16 version = 1, uint8 dtype (0 = float32),
 * uint8 flags = 0, uint32 ndim (2 or 3), ndim x uint64 shape, then the
 * row-major float32 payload. A 3-D file (height, width, d) flattens to
 * height*width rows and keeps the grid.
 */

export class TensorFormatError extends Error {}

export interface DecodedTensor {
  data: Float32Array;
  rows: number;
  cols: number;
  grid?: [number, number];
}

const MAGIC = "QALN";
const VERSION = 1;
const DTYPE_FLOAT32 = 0;
const HEADER_SIZE = 12;

export function encodeMatrix(
  data: Float32Array,
  rows: number,
  cols: number,
  grid?: [number, number],
): Buffer {
  if (data.length !== rows * cols) {
    throw new TensorFormatError(
      `payload has ${data.length} values, expected ${rows}x${cols}`,
    );
  }
  const shape: number[] = grid ? [grid[0], grid[1], cols] : [rows, cols];
  if (grid && grid[0] * grid[1] !== rows) {
    throw new TensorFormatError(`grid ${grid} does not cover ${rows} rows`);
  }
  const buf = Buffer.alloc(HEADER_SIZE + 8 * shape.length + 4 * data.length);
  buf.write(MAGIC, 0, "ascii");
  buf.writeUInt16LE(VERSION, 4);
  buf.writeUInt8(DTYPE_FLOAT32, 6);
  buf.writeUInt8(0, 7);
  buf.writeUInt32LE(shape.length, 8);
  let off = HEADER_SIZE;
  for (const s of shape) {
    buf.writeBigUInt64LE(BigInt(s), off);
    off += 8;
  }
  for (let i = 0; i < data.length; i++) {
    buf.writeFloatLE(data[i], off);
    off += 4;
  }
  return buf;
}

export function decodeTensor(buf: Buffer): DecodedTensor {
  if (buf.length < 4 || buf.toString("ascii", 0, 4) !== MAGIC) {
    throw new TensorFormatError("BadMagic: not a QALN tensor file");
  }
  if (buf.length < HEADER_SIZE) {
    throw new TensorFormatError("TruncatedPayload: file ends inside the header");
  }
  const version = buf.readUInt16LE(4);
  if (version !== VERSION) {
    throw new TensorFormatError(`UnsupportedVersion: ${version}`);
  }
  const dtype = buf.readUInt8(6);
  if (dtype !== DTYPE_FLOAT32) {
    throw new TensorFormatError(`UnsupportedDtype: code ${dtype}`);
  }
  if (buf.readUInt8(7) !== 0) {
    throw new TensorFormatError("UnsupportedFlags: nonzero flags");
  }
  const ndim = buf.readUInt32LE(8);
  if (ndim !== 2 && ndim !== 3) {
    throw new TensorFormatError(`UnsupportedRank: ndim ${ndim}`);
  }
  if (buf.length < HEADER_SIZE + 8 * ndim) {
    throw new TensorFormatError("TruncatedPayload: file ends inside the shape block");
  }
  const shape: number[] = [];
  let off = HEADER_SIZE;
  for (let i = 0; i < ndim; i++) {
    shape.push(Number(buf.readBigUInt64LE(off)));
    off += 8;
  }
  const count = shape.reduce((a, b) => a * b, 1);
  if (buf.length !== off + 4 * count) {
    throw new TensorFormatError(
      `TruncatedPayload: payload has ${buf.length - off} bytes, expected ${4 * count}`,
    );
  }
  const data = new Float32Array(count);
  for (let i = 0; i < count; i++) {
    data[i] = buf.readFloatLE(off + 4 * i);
    if (!Number.isFinite(data[i])) {
      throw new TensorFormatError("NonFiniteValue: payload contains NaN or Inf");
    }
  }
  if (ndim === 2) {
    return { data, rows: shape[0], cols: shape[1] };
  }
  const [h, w, d] = shape;
  return { data, rows: h * w, cols: d, grid: [h, w] };
}
