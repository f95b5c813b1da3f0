/**
 * TensorFlow.js custom-gradient wrapper.
 *
 * The wrapped op calls the backend synchronously for both the loss value and
 * the exact analytic gradient, then hands tfjs the gradient as a constant, so
 * the loss can sit inside a tfjs training graph like any native op. Note that
 * tfjs tensors are float32, so values and gradients are rounded once on the
 * way in.
 */

import * as tf from "@tensorflow/tfjs";

import { ArrayView } from "./arrayview.js";
import { Lesionkit, LossConfigInput, LossId } from "./binding.js";

export interface TfLossOp {
  (x: tf.Tensor): tf.Scalar;
}

/**
 * Build a differentiable tfjs op computing `lossId` against a fixed ground
 * truth. The input tensor holds the foreground probabilities of the flat
 * x-fastest field (any shape with gt.dims[0]*gt.dims[1]*gt.dims[2] elements).
 */
export function wrapLoss(
  binding: Lesionkit,
  lossId: LossId,
  gt: ArrayView,
  config: LossConfigInput = {},
): TfLossOp {
  const op = tf.customGrad((x, save) => {
    const tensor = x as tf.Tensor;
    const probs = Float32Array.from(tensor.dataSync());
    const result = binding.lossForwardBackward(
      lossId,
      { data: probs, dims: gt.dims, spacing: gt.spacing },
      gt,
      config,
    );
    const gradConst = tf.tensor(Array.from(result.grad), tensor.shape, "float32");
    (save as tf.GradSaveFunc)([gradConst]);
    return {
      value: tf.scalar(result.value, "float32"),
      gradFunc: (dy: tf.Tensor, saved: tf.Tensor[]) => [dy.mul(saved[0])],
    };
  });
  return (x: tf.Tensor) => op(x) as tf.Scalar;
}
