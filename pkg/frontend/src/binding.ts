/**
 * Array-level bindings for the lesionkit loss kernels and case evaluation.
 *
 * Values and gradients are computed by the backend in float64 and returned
 * unrounded (gradients travel as base64 float64), so results are numerically
 * identical to calling the backend directly on the same inputs.
 */

import { readFileSync } from "node:fs";

import {
  ArrayView,
  ServerError,
  checkSameGeometry,
  checkView,
  decodeF64,
  toWire,
} from "./arrayview.js";
import { BridgeOptions, SyncBridge } from "./bridge.js";

export type LossId = "dice" | "focal" | "dfl" | "l1dfl";

export interface LossConfigInput {
  epsilon?: number;
  gamma?: number;
  alpha?: number;
  bin_width?: number;
  focal_reduction?: "mean" | "sum";
}

export interface BinRow {
  bin: number;
  center: number;
  count: number;
  eff_width: number;
  density: number;
  weight: number | null;
}

export interface LossResult {
  value: number;
  /** d(loss)/d(p_i) over the flat field, full float64 precision. */
  grad: Float64Array;
  /** Residual bin table (present for the density-weighted loss). */
  bins?: BinRow[];
  /** True when mixed input dtypes forced an upcast copy before transport. */
  copied: boolean;
}

/** Mirrors the backend per-case report schema key for key. */
export interface CaseReport {
  case_id: string;
  tp: number;
  fp: number;
  fn: number;
  partial_overlap: number;
  f1: number;
  patient_dsc: number;
  lesion_dscs: number[];
  matches: [number, number[]][];
  mtv_ml: number[];
  tla: number[];
  tmtv_ml: number;
  tla_total: number;
  pred_tmtv_ml: number;
  dmax_cm: number | null;
  gt_lesion_count: number;
  pred_lesion_count: number;
}

export class Lesionkit {
  private readonly bridge: SyncBridge;

  constructor(options: BridgeOptions = {}) {
    this.bridge = new SyncBridge(options);
  }

  get version(): string {
    return this.bridge.serverVersion;
  }

  /**
   * Forward and backward pass of one loss over a probability field p and a
   * binary mask g. Returns the scalar value and the exact per-voxel gradient.
   */
  lossForwardBackward(
    lossId: LossId,
    p: ArrayView,
    g: ArrayView,
    config: LossConfigInput = {},
  ): LossResult {
    checkView(p, "p");
    checkView(g, "g");
    checkSameGeometry(p, g, ["p", "g"]);
    const wire = toWire([p, g]);
    const resp = this.bridge.call({
      op: "loss",
      loss_id: lossId,
      dims: p.dims,
      spacing: p.spacing ?? [1, 1, 1],
      dtype: wire.dtype,
      p_b64: wire.payloads[0],
      g_b64: wire.payloads[1],
      config,
    });
    if (!resp.ok) {
      throw new ServerError(String(resp.code ?? "error"), String(resp.error));
    }
    return {
      value: resp.value as number,
      grad: decodeF64(resp.grad_b64 as string),
      bins: resp.bins as BinRow[] | undefined,
      copied: wire.copied,
    };
  }

  /**
   * Full per-case evaluation (components, detections, DSC, clinical
   * quantities) of a predicted mask against ground truth and PET.
   */
  evaluateCase(
    pred: ArrayView,
    gt: ArrayView,
    pet: ArrayView,
    caseId = "",
  ): CaseReport {
    checkView(pred, "pred");
    checkView(gt, "gt");
    checkView(pet, "pet");
    checkSameGeometry(pred, gt, ["pred", "gt"]);
    checkSameGeometry(pred, pet, ["pred", "pet"]);
    const wire = toWire([pred, gt, pet]);
    const resp = this.bridge.call({
      op: "evaluate",
      dims: pred.dims,
      spacing: pred.spacing ?? [1, 1, 1],
      dtype: wire.dtype,
      pred_b64: wire.payloads[0],
      gt_b64: wire.payloads[1],
      pet_b64: wire.payloads[2],
      case_id: caseId,
    });
    if (!resp.ok) {
      throw new ServerError(String(resp.code ?? "error"), String(resp.error));
    }
    return resp.report as CaseReport;
  }

  /** Resident-set size of the backend process in kB (Linux /proc). */
  backendRssKb(): number {
    const pid = this.bridge.backendPid();
    const status = readFileSync(`/proc/${pid}/status`, "utf8");
    const match = /VmRSS:\s+(\d+)\s+kB/.exec(status);
    if (!match) {
      throw new Error("VmRSS not found in /proc status");
    }
    return Number(match[1]);
  }

  close(): void {
    this.bridge.close();
  }
}
