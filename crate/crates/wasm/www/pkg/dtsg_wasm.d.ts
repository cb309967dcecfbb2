/* tslint:disable */
/* eslint-disable */

/**
 * A tiny backbone trained on a synthetic corpus, kept alive between calls.
 */
export class GroundingDemo {
    free(): void;
    [Symbol.dispose](): void;
    inspect(index: number): string;
    /**
     * Generates a corpus and trains the backbone for `epochs` epochs.
     */
    constructor(seed: bigint, salience_boost: number, epochs: number);
    testCount(): number;
    /**
     * Best validation R@1, IoU=0.5 reached during training.
     */
    valRecall(): number;
}

/**
 * JSON list of `{start, end, score, iou}`. A negative `ref_start` means no
 * reference segment.
 */
export function decode(start: Float64Array, end: Float64Array, top_n: number, max_len: number, ref_start: number, ref_end: number): string;

/**
 * Clip norms of a few train and test videos plus how often "pick the
 * loudest clip" lands in the target on each split.
 */
export function synthetic_videos(seed: bigint, salience_boost: number, train_correlation: number, per_split: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_groundingdemo_free: (a: number, b: number) => void;
    readonly decode: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number) => [number, number, number, number];
    readonly groundingdemo_inspect: (a: number, b: number) => [number, number, number, number];
    readonly groundingdemo_new: (a: bigint, b: number, c: number) => [number, number, number];
    readonly groundingdemo_testCount: (a: number) => number;
    readonly groundingdemo_valRecall: (a: number) => number;
    readonly synthetic_videos: (a: bigint, b: number, c: number, d: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
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
