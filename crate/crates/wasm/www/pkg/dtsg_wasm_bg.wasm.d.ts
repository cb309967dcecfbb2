/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_groundingdemo_free: (a: number, b: number) => void;
export const decode: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number) => [number, number, number, number];
export const groundingdemo_inspect: (a: number, b: number) => [number, number, number, number];
export const groundingdemo_new: (a: bigint, b: number, c: number) => [number, number, number];
export const groundingdemo_testCount: (a: number) => number;
export const groundingdemo_valRecall: (a: number) => number;
export const synthetic_videos: (a: bigint, b: number, c: number, d: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
