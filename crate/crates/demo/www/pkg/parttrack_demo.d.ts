/* tslint:disable */
/* eslint-disable */

/**
 * `[iou, giou, hull_x, hull_y, hull_w, hull_h]` for two `[x, y, w, h]` boxes.
 */
export function compareBoxes(a: Float64Array, b: Float64Array): Float64Array;

/**
 * Box `[cx, cy, w, h]` from flat `[x0, y0, x1, y1, ...]` points, all treated
 * as target parts. `formula` is `"std"` or `"literal"`.
 */
export function estimateBox(points: Float64Array, sigma: number, formula: string): Float64Array;

/**
 * Per-category counts of the argmax over `draws` Gumbel-softmax samples,
 * followed by the mean soft sample.
 */
export function gumbelHistogram(logits: Float64Array, tau: number, draws: number, seed: bigint): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly compareBoxes: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly estimateBox: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly gumbelHistogram: (a: number, b: number, c: number, d: number, e: bigint) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
