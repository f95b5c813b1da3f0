export {
  ArrayView,
  Dims,
  ServerError,
  ShapeMismatchError,
  Spacing,
} from "./arrayview.js";
export { BridgeError, BridgeOptions, SyncBridge } from "./bridge.js";
export {
  BinRow,
  CaseReport,
  Lesionkit,
  LossConfigInput,
  LossId,
  LossResult,
} from "./binding.js";
export { decodeVvol, encodeVvol, Volume, VolumeKind } from "./vvol.js";
export { TfLossOp, wrapLoss } from "./tfjs.js";
