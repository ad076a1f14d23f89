/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const compare_traces: (a: number, b: number, c: number, d: number) => [number, number];
export const split_fib: (a: number, b: number) => [number, number];
export const tsx_write_set: (a: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
