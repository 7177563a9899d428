/**
 * Documentation-only sketch: substituting rearranged cross-image
 * attention into a host pipeline's self-attention hook. Not a tested
 * surface; adapt the host types to your framework.
 *
 * The host is expected to hand over per-head 2-D matrices as contiguous
 * row-major Float32Arrays (copy GPU tensors to host memory first).
 */

import { BoundaryArray, ffiRearrange, ffiRearrangedAttention } from "../src";

interface AttentionHookContext {
  // Queries/keys/values of the appearance image at this layer, one head.
  qApp: BoundaryArray;
  kApp: BoundaryArray;
  vApp: BoundaryArray;
  // Structure-image queries captured at the same layer, same head.
  qStr: BoundaryArray;
  // Evolving output-image queries for the current denoising step.
  qOut: BoundaryArray;
}

/**
 * Replace the layer's plain self-attention output with attention over
 * appearance keys/values rearranged onto structure positions. The
 * aggregation can be computed once per (layer, image pair) and reused
 * across steps; it only depends on qApp and qStr.
 */
export function rearrangedAttentionHook(ctx: AttentionHookContext): BoundaryArray {
  const { kStar, vStar } = ffiRearrange(ctx.qApp, ctx.qStr, ctx.kApp, ctx.vApp, 1);
  return ffiRearrangedAttention(ctx.qOut, kStar, vStar, 1.0);
}

/**
 * Multi-head wrapper: hosts split heads and call once per head.
 */
export function rearrangedAttentionAllHeads(
  heads: AttentionHookContext[],
): BoundaryArray[] {
  return heads.map(rearrangedAttentionHook);
}
