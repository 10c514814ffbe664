/* tslint:disable */
/* eslint-disable */

/**
 * Integrate-and-fire over comma-separated frame weights.
 */
export function cif_firing(alphas: string, threshold: number, emit_tail: boolean): string;

/**
 * Posterior grid, loss, best path and the most likely alignments of
 * `target` (comma-separated token ids).
 */
export function ctc_lattice(target: string, frames: number, vocab: number, sharpness: number, seed: number): string;

/**
 * Tree-order insertion rounds for a target of `len` tokens.
 */
export function insertion_order(len: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly cif_firing: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly ctc_lattice: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly insertion_order: (a: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
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
