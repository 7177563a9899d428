export {
  BoundaryArray,
  BoundaryValidationError,
  CliResult,
  PrimaryError,
  RearrangedKV,
  ffiRearrange,
  ffiRearrangedAttention,
  invokeCli,
  validateBoundary,
} from "./boundary";
export { DecodedTensor, TensorFormatError, decodeTensor, encodeMatrix } from "./tensorfile";
