/* tslint:disable */
/* eslint-disable */

/**
 * A set of equally sized T x F images, row-major, frames first.
 */
export class Panels {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    bins(): number;
    count(): number;
    frames(): number;
    name(i: number): string;
    /**
     * Panel `i` as a Float32Array of length frames * bins.
     */
    panel(i: number): Float32Array;
    summary(): string;
}

export function simulate(seed: number, snr_db: number, suppress_frac: number): Panels;

export function tone_fbank(freq_hz: number, noise: number): Panels;

export function train_and_fuse(seed: number, snr_db: number, suppress_frac: number, steps: number): Panels;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_panels_free: (a: number, b: number) => void;
    readonly panels_bins: (a: number) => number;
    readonly panels_count: (a: number) => number;
    readonly panels_frames: (a: number) => number;
    readonly panels_name: (a: number, b: number) => [number, number];
    readonly panels_panel: (a: number, b: number) => [number, number];
    readonly panels_summary: (a: number) => [number, number];
    readonly simulate: (a: number, b: number, c: number) => [number, number, number];
    readonly tone_fbank: (a: number, b: number) => [number, number, number];
    readonly train_and_fuse: (a: number, b: number, c: number, d: number) => [number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __externref_table_dealloc: (a: number) => void;
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
