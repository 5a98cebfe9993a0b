/**
 * Line protocol shared with the pipeline's exec scorer backend.
 *
 * Request:  {"rid": string, "question": string, "steps": string[]}
 * Response: {"rid": string, "scores": number[]}  // scores.length === steps.length
 *
 * One JSON message per line, UTF-8. Responses may be emitted out of order;
 * rid correlates them. Any non-conforming request line is a protocol error.
 */

export interface ScoreRequest {
  rid: string;
  question: string;
  steps: string[];
}

export interface ScoreResponse {
  rid: string;
  scores: number[];
}

export class ProtocolError extends Error {
  constructor(reason: string, public readonly line: string) {
    super(`${reason}: ${line.length > 300 ? line.slice(0, 300) + "…" : line}`);
    this.name = "ProtocolError";
  }
}

export function parseRequest(line: string): ScoreRequest {
  let value: unknown;
  try {
    value = JSON.parse(line);
  } catch {
    return invalid("request is not valid JSON", line);
  }
  if (typeof value !== "object" || value === null || Array.isArray(value)) {
    return invalid("request is not an object", line);
  }
  const record = value as Record<string, unknown>;
  if (typeof record.rid !== "string" || record.rid.length === 0) {
    return invalid("request rid must be a non-empty string", line);
  }
  if (typeof record.question !== "string") {
    return invalid("request question must be a string", line);
  }
  if (!Array.isArray(record.steps) || !record.steps.every((s) => typeof s === "string")) {
    return invalid("request steps must be an array of strings", line);
  }
  return { rid: record.rid, question: record.question, steps: record.steps as string[] };
}

function invalid(reason: string, line: string): never {
  throw new ProtocolError(reason, line);
}

export function encodeResponse(response: ScoreResponse): string {
  for (const score of response.scores) {
    if (!Number.isFinite(score) || score < 0 || score > 1) {
      throw new ProtocolError(`score ${score} outside [0, 1]`, response.rid);
    }
  }
  return JSON.stringify({ rid: response.rid, scores: response.scores });
}
