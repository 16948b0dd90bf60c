/** Wiring: DOM events -> API requests -> render. All localization and
 *  ranking math lives on the server; this module only routes data. */

import { ApiClient, ApiError } from "./api.js";
import {
  RequestSequencer,
  clampTheta,
  initialState,
  localizeViewModel,
  patchFromPixel,
  representerViewModel,
  type LocalizeVM,
  type ViewState,
} from "./state.js";
import {
  drawBoxes,
  drawHeatmap,
  drawMask,
  drawPatchGrid,
  formatValue,
  renderError,
  renderRepresenterPanel,
} from "./render.js";
import type { ActivationResponse, ImageInfo, ImportanceResponse } from "./types.js";

const CANVAS_SIZE = 512;

declare global {
  interface Window {
    REPRLOC_BASE_URL?: string;
  }
}

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

class Inspector {
  private readonly api: ApiClient;
  private readonly state: ViewState = initialState();
  private readonly seq = new RequestSequencer();
  private images: ImageInfo[] = [];
  private activation: ActivationResponse | null = null;
  private importance: ImportanceResponse | null = null;
  private localization: LocalizeVM | null = null;

  private readonly canvas = el<HTMLCanvasElement>("view");
  private readonly panel = el<HTMLElement>("representer-panel");
  private readonly status = el<HTMLElement>("status");

  constructor() {
    this.api = new ApiClient(window.REPRLOC_BASE_URL ?? "");
  }

  private current(): ImageInfo | null {
    return this.images.find((i) => i.image_id === this.state.imageId) ?? null;
  }

  async start(): Promise<void> {
    const select = el<HTMLSelectElement>("image-select");
    try {
      const meta = await this.api.meta();
      el("meta").textContent =
        `dim ${meta.dim} | tau ${formatValue(meta.predictors[0]?.tau ?? null)}` +
        ` | ${meta.predictors.length} predictor(s)`;
      const listing = await this.api.images();
      this.images = listing.images;
    } catch (error) {
      renderError(this.panel, `cannot reach service: ${String(error)}`);
      return;
    }
    for (const info of this.images) {
      const option = document.createElement("option");
      option.value = info.image_id;
      option.textContent = `${info.image_id} [${info.split}]`;
      select.appendChild(option);
    }
    select.addEventListener("change", () => void this.selectImage(select.value));

    const slider = el<HTMLInputElement>("theta");
    slider.addEventListener("input", () =>
      void this.setThreshold(clampTheta(Number(slider.value))),
    );

    for (const name of ["activation", "importance", "boxes", "gt"] as const) {
      const box = el<HTMLInputElement>(`toggle-${name}`);
      box.checked = this.state.overlays[name];
      box.addEventListener("change", () => {
        this.state.overlays[name] = box.checked;
        this.draw();
      });
    }

    this.canvas.addEventListener("click", (event) => {
      const rect = this.canvas.getBoundingClientRect();
      const info = this.current();
      if (!info) return;
      const patch = patchFromPixel(
        event.clientX - rect.left,
        event.clientY - rect.top,
        rect.width,
        rect.height,
        info.grid_width,
        info.grid_height,
      );
      if (patch) void this.selectPatch(patch.row, patch.col);
    });

    const first = this.images[0];
    if (first) {
      select.value = first.image_id;
      await this.selectImage(first.image_id);
    }
  }

  private async selectImage(imageId: string): Promise<void> {
    this.state.imageId = imageId;
    this.state.patch = null;
    this.panel.replaceChildren();
    const seq = this.seq.begin("image");
    try {
      const [activation, importance] = await Promise.all([
        this.api.activation(imageId),
        this.api.importance(imageId),
      ]);
      if (!this.seq.isCurrent("image", seq)) return; // superseded selection
      this.activation = activation;
      this.importance = importance;
      this.status.textContent = activation.degenerate
        ? "degenerate activation map (constant scores)"
        : "";
    } catch (error) {
      renderError(this.panel, String(error));
      return;
    }
    await this.setThreshold(this.state.theta);
  }

  private async setThreshold(theta: number): Promise<void> {
    this.state.theta = theta;
    el("theta-value").textContent = theta.toFixed(2);
    const imageId = this.state.imageId;
    if (!imageId) return;
    const seq = this.seq.begin("localize");
    try {
      const response = await this.api.localize(imageId, theta);
      if (!this.seq.isCurrent("localize", seq)) return; // stale theta
      this.localization = localizeViewModel(response);
      this.draw();
    } catch (error) {
      renderError(this.panel, String(error));
    }
  }

  private async selectPatch(row: number, col: number): Promise<void> {
    this.state.patch = { row, col };
    this.draw();
    const imageId = this.state.imageId;
    if (!imageId) return;
    const seq = this.seq.begin("representer");
    try {
      const response = await this.api.representer(
        imageId, row, col, this.state.k, this.state.polarity,
      );
      if (!this.seq.isCurrent("representer", seq)) return; // stale patch
      renderRepresenterPanel(this.panel, representerViewModel(response));
    } catch (error) {
      if (error instanceof ApiError) {
        renderError(this.panel, error.detail); // e.g. zero-norm patch: state kept
      } else {
        renderError(this.panel, String(error));
      }
    }
  }

  private draw(): void {
    const ctx = this.canvas.getContext("2d");
    const info = this.current();
    if (!ctx || !info) return;
    ctx.clearRect(0, 0, CANVAS_SIZE, CANVAS_SIZE);
    ctx.fillStyle = "#10131a";
    ctx.fillRect(0, 0, CANVAS_SIZE, CANVAS_SIZE);

    if (this.state.overlays.activation && this.activation) {
      drawHeatmap(
        ctx, this.activation.normalized,
        this.activation.grid_width, this.activation.grid_height,
        CANVAS_SIZE, CANVAS_SIZE,
      );
    } else if (this.state.overlays.importance && this.importance) {
      // display-only min-max of the importance grid for coloring
      const alpha = this.importance.alpha;
      const lo = Math.min(...alpha);
      const hi = Math.max(...alpha);
      const shifted = alpha.map((v) => (hi > lo ? (v - lo) / (hi - lo) : 0));
      drawHeatmap(
        ctx, shifted,
        this.importance.grid_width, this.importance.grid_height,
        CANVAS_SIZE, CANVAS_SIZE,
      );
    }

    if (this.localization && !this.localization.degenerate) {
      drawMask(ctx, this.localization, CANVAS_SIZE, CANVAS_SIZE);
      if (this.state.overlays.boxes) {
        drawBoxes(
          ctx, this.localization.boxes,
          info.image_width, info.image_height,
          CANVAS_SIZE, CANVAS_SIZE,
          "#39d98a", "#ffe14d",
        );
      }
    }
    if (this.state.overlays.gt) {
      drawBoxes(
        ctx,
        info.gt_boxes.map(([x0, y0, x1, y1]) => ({
          x0: x0 ?? 0, y0: y0 ?? 0, x1: x1 ?? 0, y1: y1 ?? 0,
        })),
        info.image_width, info.image_height,
        CANVAS_SIZE, CANVAS_SIZE,
        "#ff5f56",
      );
    }
    drawPatchGrid(
      ctx, info.grid_width, info.grid_height,
      CANVAS_SIZE, CANVAS_SIZE, this.state.patch,
    );
  }
}

void new Inspector().start();
