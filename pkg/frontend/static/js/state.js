/** View state and the pure logic around it: threshold clamping, pixel ->
 *  patch mapping, stale-response bookkeeping, and view-model builders that
 *  pass service numbers through untouched. */
export function initialState() {
    return {
        imageId: null,
        theta: 0.5,
        patch: null,
        k: 5,
        polarity: "both",
        overlays: { activation: true, importance: false, boxes: true, gt: true },
    };
}
export function clampTheta(value) {
    if (Number.isNaN(value))
        return 0.5;
    return Math.min(1, Math.max(0, value));
}
/** Map a pixel position on the rendered canvas to the containing patch. */
export function patchFromPixel(px, py, displayWidth, displayHeight, gridWidth, gridHeight) {
    if (displayWidth <= 0 || displayHeight <= 0)
        return null;
    if (px < 0 || py < 0 || px >= displayWidth || py >= displayHeight)
        return null;
    const col = Math.min(gridWidth - 1, Math.floor((px / displayWidth) * gridWidth));
    const row = Math.min(gridHeight - 1, Math.floor((py / displayHeight) * gridHeight));
    return { row, col };
}
/** Monotonically numbered requests per channel; responses that are not the
 *  latest issue for their channel are discarded (superseded theta/patch). */
export class RequestSequencer {
    constructor() {
        this.counters = new Map();
    }
    begin(channel) {
        const next = (this.counters.get(channel) ?? 0) + 1;
        this.counters.set(channel, next);
        return next;
    }
    isCurrent(channel, seq) {
        return this.counters.get(channel) === seq;
    }
}
function toVM(entry, polarity) {
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
export function representerViewModel(response) {
    const entries = [
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
function sameBox(box, chosen) {
    return (chosen !== null &&
        box.x0 === chosen[0] &&
        box.y0 === chosen[1] &&
        box.x1 === chosen[2] &&
        box.y1 === chosen[3]);
}
export function localizeViewModel(response) {
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
