/** Wire protocol: envelope codec and session message types.
 *
 * Mirrors docs/wire-protocol.md. The console validates every inbound frame
 * the same way the gateway validates ours: bad JSON, a missing type, a
 * foreign protocol version, or a non-object payload is a FrameError, and
 * unknown envelope fields are dropped rather than carried around.
 */

export const PROTOCOL_VERSION = "1";

export interface WireMessage {
  type: string;
  session_id: string;
  seq: number;
  payload: Record<string, unknown>;
  protocol_version: string;
}

export const SERVER_TYPES = new Set([
  "hello",
  "state",
  "plan",
  "action_start",
  "action_end",
  "wait_satisfied",
  "human_event",
  "perceive_result",
  "replan",
  "metrics",
  "goal_reached",
  "ack",
  "reject",
  "error",
  "heartbeat",
]);

export const CLIENT_TYPES = new Set([
  "human_action",
  "idle_toggle",
  "pull_tool",
  "pause",
  "resume",
  "speed",
]);

export class FrameError extends Error {}

function isRecord(v: unknown): v is Record<string, unknown> {
  return typeof v === "object" && v !== null && !Array.isArray(v);
}

export function decode(text: string, known: Set<string>): WireMessage {
  let raw: unknown;
  try {
    raw = JSON.parse(text);
  } catch {
    throw new FrameError("malformed frame: not valid JSON");
  }
  if (!isRecord(raw)) {
    throw new FrameError("malformed frame: expected a JSON object");
  }
  const type = raw["type"];
  if (typeof type !== "string") {
    throw new FrameError("malformed frame: missing type");
  }
  const version = raw["protocol_version"];
  if (version !== PROTOCOL_VERSION) {
    throw new FrameError(
      `protocol version mismatch: got ${JSON.stringify(version)}, speak ${PROTOCOL_VERSION}`,
    );
  }
  if (!known.has(type)) {
    throw new FrameError(`unknown message type ${JSON.stringify(type)}`);
  }
  const payload = raw["payload"];
  if (!isRecord(payload)) {
    throw new FrameError("malformed frame: payload must be an object");
  }
  const seq = raw["seq"];
  if (typeof seq !== "number" || !Number.isInteger(seq)) {
    throw new FrameError("malformed frame: seq must be an integer");
  }
  const sessionId = raw["session_id"];
  return {
    type,
    session_id: typeof sessionId === "string" ? sessionId : "",
    seq,
    payload,
    protocol_version: PROTOCOL_VERSION,
  };
}

export function encode(message: WireMessage): string {
  return JSON.stringify(message);
}

/** Builds outbound frames with the strictly increasing per-direction seq. */
export class Outbox {
  private seq = 0;
  sessionId = "";

  make(type: string, payload: Record<string, unknown> = {}): WireMessage {
    if (!CLIENT_TYPES.has(type)) {
      throw new FrameError(`not a client message type: ${type}`);
    }
    this.seq += 1;
    return {
      type,
      session_id: this.sessionId,
      seq: this.seq,
      payload,
      protocol_version: PROTOCOL_VERSION,
    };
  }
}
