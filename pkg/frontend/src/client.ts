/** Gateway client: wires a text transport to the console model.
 *
 * Transport-agnostic on purpose. The browser hands it a WebSocket's send
 * and pipes messages into handleText; tests can do the same with any
 * in-process fake or the ws package.
 */

import { ConsoleModel } from "./model.js";
import { decode, encode, FrameError, SERVER_TYPES, WireMessage } from "./protocol.js";

export class GatewayClient {
  readonly model: ConsoleModel;
  onChange: (model: ConsoleModel) => void = () => {};
  private readonly send: (text: string) => void;

  constructor(send: (text: string) => void, model: ConsoleModel = new ConsoleModel()) {
    this.send = send;
    this.model = model;
  }

  handleText(text: string): void {
    let message: WireMessage;
    try {
      message = decode(text, SERVER_TYPES);
    } catch (error) {
      if (error instanceof FrameError) {
        this.model.errors.push(`bad server frame: ${error.message}`);
        this.onChange(this.model);
        return;
      }
      throw error;
    }
    if (!this.model.outbox.sessionId && message.session_id) {
      this.model.outbox.sessionId = message.session_id;
    }
    this.model.ingest(message);
    this.onChange(this.model);
  }

  private dispatch(message: WireMessage): void {
    this.send(encode(message));
  }

  pick(object: string): void {
    this.dispatch(this.model.pick(object));
  }

  pullTool(): void {
    this.dispatch(this.model.pullTool());
  }

  idleToggle(flag: boolean): void {
    this.dispatch(this.model.idleToggle(flag));
  }

  pause(): void {
    this.dispatch(this.model.pause());
  }

  resume(): void {
    this.dispatch(this.model.resume());
  }

  setSpeed(scale: number): void {
    this.dispatch(this.model.setSpeed(scale));
  }
}

interface EntityObject {
  name: string;
  region: string;
  kind: string;
}

interface EntityAgent {
  name: string;
  kind: string;
  reach: string[];
}

/** Components the operator's human could claim right now. */
export function pickableObjects(
  model: ConsoleModel,
  excludeRegions: string[] = [],
): string[] {
  const objects = (model.entities["objects"] ?? []) as EntityObject[];
  const agents = (model.entities["agents"] ?? []) as EntityAgent[];
  const human = agents.find((a) => a.kind === "human");
  if (!human) return [];
  const reach = new Set(human.reach);
  const excluded = new Set(excludeRegions);
  const snapObjects = (model.snapshot?.["objects"] ?? {}) as Record<
    string,
    Record<string, unknown>
  >;
  const out: string[] = [];
  for (const obj of objects) {
    if (obj.kind !== "component") continue;
    const live = snapObjects[obj.name];
    const region = live ? String((live["at"] as unknown[])[0]) : obj.region;
    if (!reach.has(region) || excluded.has(region)) continue;
    if (live) {
      const held = (live["grasped_by"] ?? []) as string[];
      if (held.length > 0 || live["assembled"] === true) continue;
    }
    out.push(obj.name);
  }
  return out.sort();
}
