#!/usr/bin/env node
/**
 * Bridge entrypoint. Examples:
 *
 *   node dist/cli.js --mode constant --value 0.5
 *   node dist/cli.js --mode replay --store traces.jsonl
 *   node dist/cli.js --mode hash --seed 7 --boundary newline --max-seq-len 2048
 *   node dist/cli.js --mode module --module ./my-value-head.js
 *
 * Exit codes: 0 clean shutdown (stdin closed), 1 usage error, 3 protocol or
 * scorer failure.
 */

import { parseArgs } from "node:util";
import { DEFAULT_CONFIG, BridgeConfig, makeScorer } from "./scorers.js";
import { serve } from "./server.js";

function parseConfig(argv: string[]): BridgeConfig {
  const { values } = parseArgs({
    args: argv,
    options: {
      mode: { type: "string", default: DEFAULT_CONFIG.mode },
      value: { type: "string", default: String(DEFAULT_CONFIG.value) },
      store: { type: "string" },
      module: { type: "string" },
      seed: { type: "string", default: String(DEFAULT_CONFIG.seed) },
      boundary: { type: "string", default: DEFAULT_CONFIG.boundary },
      "max-seq-len": { type: "string", default: String(DEFAULT_CONFIG.maxSeqLen) },
      "batch-size": { type: "string", default: String(DEFAULT_CONFIG.batchSize) },
      device: { type: "string", default: DEFAULT_CONFIG.device },
      "shuffle-responses": { type: "boolean", default: false },
    },
  });
  const mode = values.mode as BridgeConfig["mode"];
  if (!["constant", "replay", "hash", "module"].includes(mode)) {
    throw new Error(`unknown mode ${JSON.stringify(values.mode)}`);
  }
  const boundary = values.boundary as BridgeConfig["boundary"];
  if (!["last-token", "newline"].includes(boundary)) {
    throw new Error(`unknown boundary ${JSON.stringify(values.boundary)}`);
  }
  const batchSize = Number(values["batch-size"]);
  if (!Number.isInteger(batchSize) || batchSize < 1) {
    throw new Error(`batch size must be a positive integer, got ${values["batch-size"]}`);
  }
  const maxSeqLen = Number(values["max-seq-len"]);
  if (!Number.isInteger(maxSeqLen) || maxSeqLen < 1) {
    throw new Error(`max seq len must be a positive integer, got ${values["max-seq-len"]}`);
  }
  return {
    mode,
    value: Number(values.value),
    store: values.store,
    modulePath: values.module,
    seed: Number(values.seed),
    boundary,
    maxSeqLen,
    batchSize,
    device: values.device as string,
    shuffleResponses: values["shuffle-responses"] as boolean,
  };
}

async function main(): Promise<number> {
  let config: BridgeConfig;
  try {
    config = parseConfig(process.argv.slice(2));
  } catch (error) {
    process.stderr.write(`usage error: ${(error as Error).message}\n`);
    return 1;
  }
  let scorer;
  try {
    scorer = await makeScorer(config);
  } catch (error) {
    process.stderr.write(`scorer setup failed: ${(error as Error).message}\n`);
    return 3;
  }
  return serve(process.stdin, process.stdout, process.stderr, {
    scorer,
    batchSize: config.batchSize,
    shuffleResponses: config.shuffleResponses,
    seed: config.seed,
  });
}

main().then(
  (code) => {
    process.exitCode = code;
  },
  (error) => {
    process.stderr.write(`fatal: ${error}\n`);
    process.exitCode = 3;
  }
);
