/**
 * Scoring backends the bridge can serve.
 *
 * "constant" and "replay" exist so protocol conformance can be verified with
 * no model installed. "hash" is a deterministic stand-in for a per-prefix
 * value head: it reads each prefix up to a configurable step boundary
 * (whether the boundary token is the step's last character or the following
 * newline is a genuine modeling choice, so it is exposed as config), applies
 * the max-sequence-length truncation a real model would, and squashes a
 * 64-bit prefix hash into (0, 1). "module" loads any user module exporting
 * `scoreSolution(question, steps) => number[]`, which is where a real
 * value-head model plugs in.
 */

import { readFileSync } from "node:fs";
import { pathToFileURL } from "node:url";
import { ScoreRequest } from "./protocol.js";

export type StepScorer = (request: ScoreRequest) => number[] | Promise<number[]>;

export interface BridgeConfig {
  mode: "constant" | "replay" | "hash" | "module";
  value: number;
  store?: string;
  modulePath?: string;
  seed: number;
  boundary: "last-token" | "newline";
  maxSeqLen: number;
  batchSize: number;
  device: string; // hint only; nothing here needs a device
  shuffleResponses: boolean;
}

export const DEFAULT_CONFIG: BridgeConfig = {
  mode: "constant",
  value: 0.5,
  seed: 0,
  boundary: "last-token",
  maxSeqLen: 4096,
  batchSize: 16,
  device: "cpu",
  shuffleResponses: false,
};

export function constantScorer(value: number): StepScorer {
  if (!Number.isFinite(value) || value < 0 || value > 1) {
    throw new Error(`constant score must be in [0, 1], got ${value}`);
  }
  return (request) => request.steps.map(() => value);
}

interface TraceRecord {
  solution_id: string;
  scores: number[];
}

export function replayScorer(storePath: string): StepScorer {
  const byId = new Map<string, number[]>();
  const text = readFileSync(storePath, "utf-8");
  for (const line of text.split("\n")) {
    if (!line.trim()) continue;
    const record = JSON.parse(line) as TraceRecord;
    if (typeof record.solution_id !== "string" || !Array.isArray(record.scores)) {
      throw new Error(`bad trace record in ${storePath}: ${line}`);
    }
    byId.set(record.solution_id, record.scores.map(Number));
  }
  return (request) => {
    const scores = byId.get(request.rid);
    if (scores === undefined) {
      throw new Error(`replay store has no scores for rid ${JSON.stringify(request.rid)}`);
    }
    if (scores.length !== request.steps.length) {
      throw new Error(
        `replay store has ${scores.length} scores for rid ${JSON.stringify(request.rid)} ` +
          `but the request has ${request.steps.length} steps`
      );
    }
    return scores;
  };
}

/** FNV-1a over UTF-8 code units, 64-bit via BigInt. */
function fnv1a64(text: string): bigint {
  let hash = 0xcbf29ce484222325n;
  const prime = 0x100000001b3n;
  const bytes = Buffer.from(text, "utf-8");
  for (const byte of bytes) {
    hash ^= BigInt(byte);
    hash = (hash * prime) & 0xffffffffffffffffn;
  }
  return hash;
}

export function hashScorer(
  seed: number,
  boundary: "last-token" | "newline",
  maxSeqLen: number
): StepScorer {
  return (request) => {
    const scores: number[] = [];
    let prefix = request.question;
    for (const step of request.steps) {
      prefix += "\n" + step;
      const boundaryText = boundary === "newline" ? prefix + "\n" : prefix;
      const truncated =
        boundaryText.length > maxSeqLen ? boundaryText.slice(-maxSeqLen) : boundaryText;
      const hash = fnv1a64(`${seed}|${truncated}`);
      // map to (0, 1) with margins so scores stay strictly inside the unit interval
      scores.push(0.02 + 0.96 * (Number(hash >> 11n) / 2 ** 53));
    }
    return scores;
  };
}

export async function moduleScorer(modulePath: string): Promise<StepScorer> {
  const loaded = await import(pathToFileURL(modulePath).href);
  const fn = loaded.scoreSolution ?? loaded.default;
  if (typeof fn !== "function") {
    throw new Error(`${modulePath} does not export scoreSolution(question, steps)`);
  }
  return async (request) => {
    const scores = await fn(request.question, request.steps);
    if (!Array.isArray(scores)) {
      throw new Error(`scoreSolution returned ${typeof scores}, expected an array`);
    }
    return scores.map(Number);
  };
}

export async function makeScorer(config: BridgeConfig): Promise<StepScorer> {
  switch (config.mode) {
    case "constant":
      return constantScorer(config.value);
    case "replay":
      if (!config.store) throw new Error("replay mode needs --store");
      return replayScorer(config.store);
    case "hash":
      return hashScorer(config.seed, config.boundary, config.maxSeqLen);
    case "module":
      if (!config.modulePath) throw new Error("module mode needs --module");
      return moduleScorer(config.modulePath);
  }
}
