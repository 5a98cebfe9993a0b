/**
 * Stdio server loop: reads request lines, answers each with one response
 * line. Requests arriving in the same tick are scored as one batch (up to
 * batchSize), and a batch's responses can be emitted in a deterministic
 * shuffled order to exercise clients' out-of-order handling; correlation is
 * by rid only. A malformed request line prints a protocol error and stops
 * the server with a nonzero status.
 */

import { Readable, Writable } from "node:stream";
import { createInterface } from "node:readline";
import { encodeResponse, parseRequest, ProtocolError, ScoreRequest } from "./protocol.js";
import { StepScorer } from "./scorers.js";

export interface ServeOptions {
  scorer: StepScorer;
  batchSize: number;
  shuffleResponses: boolean;
  seed: number;
}

/** mulberry32: small deterministic PRNG for response shuffling. */
function mulberry32(seed: number): () => number {
  let state = seed >>> 0;
  return () => {
    state = (state + 0x6d2b79f5) >>> 0;
    let t = state;
    t = Math.imul(t ^ (t >>> 15), t | 1);
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61);
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

function shuffle<T>(items: T[], rand: () => number): T[] {
  const out = items.slice();
  for (let i = out.length - 1; i > 0; i--) {
    const j = Math.floor(rand() * (i + 1));
    [out[i], out[j]] = [out[j], out[i]];
  }
  return out;
}

export async function serve(
  input: Readable,
  output: Writable,
  errors: Writable,
  options: ServeOptions
): Promise<number> {
  const rand = mulberry32(options.seed);
  let pending: ScoreRequest[] = [];
  let flushing = Promise.resolve();
  let failed: Error | null = null;

  const flushBatch = async (batch: ScoreRequest[]) => {
    const responses = await Promise.all(
      batch.map(async (request) => {
        const scores = await options.scorer(request);
        if (scores.length !== request.steps.length) {
          throw new ProtocolError(
            `scorer produced ${scores.length} scores for ${request.steps.length} steps`,
            request.rid
          );
        }
        return encodeResponse({ rid: request.rid, scores });
      })
    );
    const ordered = options.shuffleResponses ? shuffle(responses, rand) : responses;
    for (const line of ordered) {
      output.write(line + "\n");
    }
  };

  const scheduleFlush = () => {
    const batch = pending;
    pending = [];
    flushing = flushing.then(() => flushBatch(batch));
    flushing.catch(() => undefined); // surfaced after the loop
    return flushing;
  };

  const reader = createInterface({ input, crlfDelay: Infinity });
  let scheduled = false;
  try {
    for await (const line of reader) {
      if (failed) break;
      if (!line.trim()) continue;
      pending.push(parseRequest(line));
      if (pending.length >= options.batchSize) {
        await scheduleFlush();
      } else if (!scheduled) {
        scheduled = true;
        setImmediate(() => {
          scheduled = false;
          if (pending.length > 0) {
            scheduleFlush().catch((error) => {
              failed = error as Error;
            });
          }
        });
      }
    }
    if (pending.length > 0) {
      await scheduleFlush();
    }
    await flushing;
  } catch (error) {
    failed = error as Error;
  }
  if (failed) {
    errors.write(`protocol error: ${failed.message}\n`);
    return 3;
  }
  return 0;
}
