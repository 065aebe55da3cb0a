/* tslint:disable */
/* eslint-disable */

/**
 * A generated series held by the page.
 */
export class Field {
    free(): void;
    [Symbol.dispose](): void;
    days(): number;
    /**
     * Sea-ice extent in million km² on `day`.
     */
    extent(day: number): number;
    frame_rgba(day: number): Uint8Array;
    constructor(size: number, days: number, seed: number, amplitude: number, trend: number, noise: number);
    /**
     * Scores persistence on the test anchors and returns the metrics CSV.
     */
    persistence_csv(): string;
    residual_max_abs(granularity: number): number;
    /**
     * Residual map for granularity 0 (daily), 1 (weekly) or 2 (monthly)
     * after [`Field::persistence_csv`].
     */
    residual_rgba(granularity: number, scale: number): Uint8Array;
    size(): number;
    test_anchors(): number;
}

/**
 * Window mask image for a `size × size` map; the query cell is dark,
 * cells it may attend to are saturated and the rest are faded.
 */
export function window_mask_rgba(size: number, window: number, shifted: boolean, qy: number, qx: number): Uint8Array;

/**
 * Number of cells the query may attend to.
 */
export function window_visible_count(size: number, window: number, shifted: boolean, qy: number, qx: number): number;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_field_free: (a: number, b: number) => void;
    readonly field_days: (a: number) => number;
    readonly field_extent: (a: number, b: number) => [number, number, number];
    readonly field_frame_rgba: (a: number, b: number) => [number, number, number, number];
    readonly field_new: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number];
    readonly field_persistence_csv: (a: number) => [number, number, number, number];
    readonly field_residual_max_abs: (a: number, b: number) => number;
    readonly field_residual_rgba: (a: number, b: number, c: number) => [number, number, number, number];
    readonly field_size: (a: number) => number;
    readonly field_test_anchors: (a: number) => number;
    readonly window_mask_rgba: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly window_visible_count: (a: number, b: number, c: number, d: number, e: number) => [number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
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
