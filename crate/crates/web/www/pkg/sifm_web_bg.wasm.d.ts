/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_field_free: (a: number, b: number) => void;
export const field_days: (a: number) => number;
export const field_extent: (a: number, b: number) => [number, number, number];
export const field_frame_rgba: (a: number, b: number) => [number, number, number, number];
export const field_new: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number];
export const field_persistence_csv: (a: number) => [number, number, number, number];
export const field_residual_max_abs: (a: number, b: number) => number;
export const field_residual_rgba: (a: number, b: number, c: number) => [number, number, number, number];
export const field_size: (a: number) => number;
export const field_test_anchors: (a: number) => number;
export const window_mask_rgba: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const window_visible_count: (a: number, b: number, c: number, d: number, e: number) => [number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
