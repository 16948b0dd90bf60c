/** Payload shapes of the /v1 inspection API. The UI treats these as the
 *  single source of truth: values are displayed verbatim, never recomputed. */

export interface ImageInfo {
  image_id: string;
  split: "train" | "test";
  image_width: number;
  image_height: number;
  grid_height: number;
  grid_width: number;
  class_id: number | null;
  gt_boxes: number[][];
}

export interface ImagesResponse {
  images: ImageInfo[];
}

export interface PredictorMeta {
  class_id: number | null;
  tau: number;
  constant_C: number;
  provenance: Record<string, unknown>;
}

export interface MetaResponse {
  dim: number;
  k_max: number;
  predictors: PredictorMeta[];
}

export interface ActivationResponse {
  image_id: string;
  grid_height: number;
  grid_width: number;
  raw: number[];
  normalized: number[];
  degenerate: boolean;
}

export interface BoxPayload {
  x0: number;
  y0: number;
  x1: number;
  y1: number;
  area: number;
}

export interface LocalizeResponse {
  image_id: string;
  theta: number;
  degenerate: boolean;
  boxes: BoxPayload[];
  chosen_box: number[] | null;
  grid_height: number;
  grid_width: number;
  normalized: number[];
  mask: { width: number; height: number; rows: string[] };
}

export interface RepresenterEntryPayload {
  image_id: string;
  row: number;
  col: number;
  alpha: number;
  similarity: number;
  value: number;
}

export interface RepresenterResponse {
  query: { image_id: string; row: number; col: number };
  tau: number;
  constant_C: number;
  activation_sum: number;
  activation: number | null;
  patches_scanned: number;
  patches_skipped: number;
  excitatory?: RepresenterEntryPayload[];
  inhibitory?: RepresenterEntryPayload[];
}

export interface ImportanceResponse {
  image_id: string;
  tau: number;
  constant_C: number;
  grid_height: number;
  grid_width: number;
  alpha: number[];
}

export type Polarity = "excitatory" | "inhibitory" | "both";
