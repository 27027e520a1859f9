/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_panels_free: (a: number, b: number) => void;
export const panels_bins: (a: number) => number;
export const panels_count: (a: number) => number;
export const panels_frames: (a: number) => number;
export const panels_name: (a: number, b: number) => [number, number];
export const panels_panel: (a: number, b: number) => [number, number];
export const panels_summary: (a: number) => [number, number];
export const simulate: (a: number, b: number, c: number) => [number, number, number];
export const tone_fbank: (a: number, b: number) => [number, number, number];
export const train_and_fuse: (a: number, b: number, c: number, d: number) => [number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_start: () => void;
