/* tslint:disable */
/* eslint-disable */

export class Rendering {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Row-major `frames x n_mels` log-mel values.
     */
    data(): Float64Array;
    durations(): Uint32Array;
    /**
     * The F0 the renderer used, per frame (0 in unvoiced frames).
     */
    f0_truth(): Float64Array;
    frames(): number;
    n_mels(): number;
}

export class Studio {
    free(): void;
    [Symbol.dispose](): void;
    mcd(a: Rendering, b: Rendering): number;
    constructor();
    render(text: string, f0_base: number, spectral_tilt: number, formant_shift: number, rate_scale: number, style: string, seed: number): Rendering;
    /**
     * Space-separated phoneme symbols.
     */
    symbols(): string;
    track_f0(r: Rendering): Float64Array;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_rendering_free: (a: number, b: number) => void;
    readonly __wbg_studio_free: (a: number, b: number) => void;
    readonly rendering_data: (a: number) => [number, number];
    readonly rendering_durations: (a: number) => [number, number];
    readonly rendering_f0_truth: (a: number) => [number, number];
    readonly rendering_frames: (a: number) => number;
    readonly rendering_n_mels: (a: number) => number;
    readonly studio_mcd: (a: number, b: number, c: number) => [number, number, number];
    readonly studio_new: () => [number, number, number];
    readonly studio_render: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number, i: number, j: number) => [number, number, number];
    readonly studio_symbols: (a: number) => [number, number];
    readonly studio_track_f0: (a: number, b: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
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
