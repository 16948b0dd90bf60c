/** View state and the pure logic around it: threshold clamping, pixel ->
 *  patch mapping, stale-response bookkeeping, and view-model builders that
 *  pass service numbers through untouched. */

import type {
  BoxPayload,
  LocalizeResponse,
  Polarity,
  RepresenterEntryPayload,
  RepresenterResponse,
} from "./types.js";

export interface OverlayToggles {
  activation: boolean;
  importance: boolean;
  boxes: boolean;
  gt: boolean;
}

export interface ViewState {
  imageId: string | null;
  theta: number;
  patch: { row: number; col: number } | null;
  k: number;
  polarity: Polarity;
  overlays: OverlayToggles;
}

export function initialState(): ViewState {
  return {
    imageId: null,
    theta: 0.5,
    patch: null,
    k: 5,
    polarity: "both",
    overlays: { activation: true, importance: false, boxes: true, gt: true },
  };
}

export function clampTheta(value: number): number {
  if (Number.isNaN(value)) return 0.5;
  return Math.min(1, Math.max(0, value));
}

/** Map a pixel position on the rendered canvas to the containing patch. */
export function patchFromPixel(
  px: number,
  py: number,
  displayWidth: number,
  displayHeight: number,
  gridWidth: number,
  gridHeight: number,
): { row: number; col: number } | null {
  if (displayWidth <= 0 || displayHeight <= 0) return null;
  if (px < 0 || py < 0 || px >= displayWidth || py >= displayHeight) return null;
  const col = Math.min(gridWidth - 1, Math.floor((px / displayWidth) * gridWidth));
  const row = Math.min(gridHeight - 1, Math.floor((py / displayHeight) * gridHeight));
  return { row, col };
}

/** Monotonically numbered requests per channel; responses that are not the
 *  latest issue for their channel are discarded (superseded theta/patch). */
export class RequestSequencer {
  private readonly counters = new Map<string, number>();

  begin(channel: string): number {
    const next = (this.counters.get(channel) ?? 0) + 1;
    this.counters.set(channel, next);
    return next;
  }

  isCurrent(channel: string, seq: number): boolean {
    return this.counters.get(channel) === seq;
  }
}

// -- view models: service payloads reshaped for rendering, values verbatim --

export interface RankedEntryVM {
  imageId: string;
  row: number;
  col: number;
  alpha: number;
  similarity: number;
  value: number;
  polarity: "excitatory" | "inhibitory";
}

export interface RepresenterVM {
  query: { imageId: string; row: number; col: number };
  /** activation reported by the service (predictor dotted with the patch) */
  activation: number | null;
  /** the full training-set sum the service reports alongside it */
  activationSum: number;
  tau: number;
  entries: RankedEntryVM[];
}

function toVM(
  entry: RepresenterEntryPayload,
  polarity: "excitatory" | "inhibitory",
): RankedEntryVM {
  return {
    imageId: entry.image_id,
    row: entry.row,
    col: entry.col,
    alpha: entry.alpha,
    similarity: entry.similarity,
    value: entry.value,
    polarity,
  };
}

export function representerViewModel(response: RepresenterResponse): RepresenterVM {
  const entries: RankedEntryVM[] = [
    ...(response.excitatory ?? []).map((e) => toVM(e, "excitatory")),
    ...(response.inhibitory ?? []).map((e) => toVM(e, "inhibitory")),
  ];
  return {
    query: {
      imageId: response.query.image_id,
      row: response.query.row,
      col: response.query.col,
    },
    activation: response.activation,
    activationSum: response.activation_sum,
    tau: response.tau,
    entries,
  };
}

export interface BoxVM {
  x0: number;
  y0: number;
  x1: number;
  y1: number;
  area: number;
  chosen: boolean;
}

export interface LocalizeVM {
  theta: number;
  degenerate: boolean;
  boxes: BoxVM[];
  maskRows: string[];
  maskWidth: number;
  maskHeight: number;
}

function sameBox(box: BoxPayload, chosen: number[] | null): boolean {
  return (
    chosen !== null &&
    box.x0 === chosen[0] &&
    box.y0 === chosen[1] &&
    box.x1 === chosen[2] &&
    box.y1 === chosen[3]
  );
}

export function localizeViewModel(response: LocalizeResponse): LocalizeVM {
  return {
    theta: response.theta,
    degenerate: response.degenerate,
    boxes: response.boxes.map((box) => ({
      x0: box.x0,
      y0: box.y0,
      x1: box.x1,
      y1: box.y1,
      area: box.area,
      chosen: sameBox(box, response.chosen_box),
    })),
    maskRows: response.mask.rows,
    maskWidth: response.mask.width,
    maskHeight: response.mask.height,
  };
}
