/** Canvas and DOM rendering. Geometry scaling for display happens here;
 *  every numeric label comes from a view model (service values verbatim,
 *  trimmed only for display with toPrecision). */

import type { LocalizeVM, RankedEntryVM, RepresenterVM } from "./state.js";

export function formatValue(value: number | null): string {
  if (value === null) return "n/a";
  if (value === 0) return "0";
  return value.toPrecision(4);
}

/** Warm ramp for positive scores, cool for negative (excitatory red,
 *  inhibitory blue), matching the panel's polarity colors. */
export function scoreColor(value: number, scale: number): string {
  const magnitude = scale > 0 ? Math.min(1, Math.abs(value) / scale) : 0;
  const channel = Math.round(95 + 160 * magnitude);
  return value >= 0
    ? `rgb(${channel}, 60, 52)`
    : `rgb(52, 74, ${channel})`;
}

export function heatColor(normalized: number): string {
  const t = Math.min(1, Math.max(0, normalized));
  const r = Math.round(28 + 220 * t);
  const g = Math.round(24 + 90 * t);
  const b = Math.round(82 - 40 * t);
  return `rgb(${r}, ${g}, ${b})`;
}

export function drawHeatmap(
  ctx: CanvasRenderingContext2D,
  values: number[],
  gridWidth: number,
  gridHeight: number,
  canvasWidth: number,
  canvasHeight: number,
): void {
  const cellW = canvasWidth / gridWidth;
  const cellH = canvasHeight / gridHeight;
  for (let row = 0; row < gridHeight; row++) {
    for (let col = 0; col < gridWidth; col++) {
      const v = values[row * gridWidth + col] ?? 0;
      ctx.fillStyle = heatColor(v);
      ctx.fillRect(col * cellW, row * cellH, Math.ceil(cellW), Math.ceil(cellH));
    }
  }
}

export function drawPatchGrid(
  ctx: CanvasRenderingContext2D,
  gridWidth: number,
  gridHeight: number,
  canvasWidth: number,
  canvasHeight: number,
  selected: { row: number; col: number } | null,
): void {
  ctx.strokeStyle = "rgba(255,255,255,0.25)";
  ctx.lineWidth = 1;
  for (let col = 1; col < gridWidth; col++) {
    const x = (col * canvasWidth) / gridWidth;
    ctx.beginPath();
    ctx.moveTo(x, 0);
    ctx.lineTo(x, canvasHeight);
    ctx.stroke();
  }
  for (let row = 1; row < gridHeight; row++) {
    const y = (row * canvasHeight) / gridHeight;
    ctx.beginPath();
    ctx.moveTo(0, y);
    ctx.lineTo(canvasWidth, y);
    ctx.stroke();
  }
  if (selected) {
    ctx.strokeStyle = "#ffe14d";
    ctx.lineWidth = 2;
    ctx.strokeRect(
      (selected.col * canvasWidth) / gridWidth,
      (selected.row * canvasHeight) / gridHeight,
      canvasWidth / gridWidth,
      canvasHeight / gridHeight,
    );
  }
}

export function drawMask(
  ctx: CanvasRenderingContext2D,
  vm: LocalizeVM,
  canvasWidth: number,
  canvasHeight: number,
): void {
  const sx = canvasWidth / vm.maskWidth;
  const sy = canvasHeight / vm.maskHeight;
  ctx.fillStyle = "rgba(255, 255, 255, 0.28)";
  for (let y = 0; y < vm.maskRows.length; y++) {
    const row = vm.maskRows[y];
    if (!row) continue;
    let x = 0;
    while (x < row.length) {
      if (row[x] === "1") {
        let end = x;
        while (end < row.length && row[end] === "1") end++;
        ctx.fillRect(x * sx, y * sy, (end - x) * sx, sy);
        x = end;
      } else {
        x++;
      }
    }
  }
}

export function drawBoxes(
  ctx: CanvasRenderingContext2D,
  boxes: { x0: number; y0: number; x1: number; y1: number; chosen?: boolean }[],
  imageWidth: number,
  imageHeight: number,
  canvasWidth: number,
  canvasHeight: number,
  color: string,
  chosenColor?: string,
): void {
  const sx = canvasWidth / imageWidth;
  const sy = canvasHeight / imageHeight;
  for (const box of boxes) {
    ctx.strokeStyle = box.chosen && chosenColor ? chosenColor : color;
    ctx.lineWidth = box.chosen ? 3 : 1.5;
    ctx.strokeRect(
      box.x0 * sx,
      box.y0 * sy,
      (box.x1 - box.x0) * sx,
      (box.y1 - box.y0) * sy,
    );
  }
}

function entryRow(entry: RankedEntryVM, scale: number): HTMLElement {
  const row = document.createElement("div");
  row.className = `entry ${entry.polarity}`;

  const swatch = document.createElement("span");
  swatch.className = "swatch";
  swatch.style.backgroundColor = scoreColor(
    entry.polarity === "excitatory" ? Math.abs(entry.value) : -Math.abs(entry.value),
    scale,
  );
  row.appendChild(swatch);

  const where = document.createElement("span");
  where.className = "where";
  where.textContent = `${entry.imageId} (${entry.row}, ${entry.col})`;
  row.appendChild(where);

  const numbers = document.createElement("span");
  numbers.className = "numbers";
  numbers.textContent =
    `a ${formatValue(entry.alpha)} x sim ${formatValue(entry.similarity)}` +
    ` = ${formatValue(entry.value)}`;
  row.appendChild(numbers);
  return row;
}

export function renderRepresenterPanel(panel: HTMLElement, vm: RepresenterVM): void {
  panel.replaceChildren();

  const header = document.createElement("div");
  header.className = "panel-header";
  header.textContent =
    `patch (${vm.query.row}, ${vm.query.col}) - activation ` +
    `${formatValue(vm.activation)} | training-sum ${formatValue(vm.activationSum)}`;
  panel.appendChild(header);

  const scale = Math.max(...vm.entries.map((e) => Math.abs(e.value)), 0);
  const excitatory = vm.entries.filter((e) => e.polarity === "excitatory");
  const inhibitory = vm.entries.filter((e) => e.polarity === "inhibitory");
  for (const [title, list] of [
    ["excitatory", excitatory],
    ["inhibitory", inhibitory],
  ] as const) {
    if (!list.length) continue;
    const section = document.createElement("div");
    section.className = `section ${title}`;
    const label = document.createElement("h3");
    label.textContent = title;
    section.appendChild(label);
    for (const entry of list) section.appendChild(entryRow(entry, scale));
    panel.appendChild(section);
  }
}

export function renderError(panel: HTMLElement, message: string): void {
  const note = document.createElement("div");
  note.className = "error";
  note.textContent = message;
  panel.replaceChildren(note);
}
