/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_rendering_free: (a: number, b: number) => void;
export const __wbg_studio_free: (a: number, b: number) => void;
export const rendering_data: (a: number) => [number, number];
export const rendering_durations: (a: number) => [number, number];
export const rendering_f0_truth: (a: number) => [number, number];
export const rendering_frames: (a: number) => number;
export const rendering_n_mels: (a: number) => number;
export const studio_mcd: (a: number, b: number, c: number) => [number, number, number];
export const studio_new: () => [number, number, number];
export const studio_render: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number, i: number, j: number) => [number, number, number];
export const studio_symbols: (a: number) => [number, number];
export const studio_track_f0: (a: number, b: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __wbindgen_start: () => void;
