/** Console state: everything the operator sees, folded from wire frames.
 *
 * The model is transport-free. It consumes already-decoded WireMessages,
 * tracks the session picture (entities, truth snapshot, current plan, the
 * event feed, streamed metrics), routes ack/reject back to the commands
 * that caused them, and watches the two protocol invariants a client can
 * check: server seq strictly increases, and no agent starts a second
 * action before ending the first.
 */

import { Outbox, WireMessage } from "./protocol.js";

export interface PlanStep {
  index: number;
  template: string;
  agent: string;
  [key: string]: unknown;
}

export interface PlanView {
  generation: number;
  steps: PlanStep[];
  completed: Set<number>;
}

export interface FeedItem {
  t: number;
  kind: string;
  agent: string | null;
  data: Record<string, unknown>;
}

export interface MetricsView {
  t: number;
  human_idle: number;
  robot_idle: number;
  functional_delay: number;
  concurrent_activity: number;
}

export interface CommandResult {
  seq: number;
  type: string;
  ok: boolean;
  reason: string;
  violations: { code: string; families: string[]; message: string }[];
}

/** Timing probe for the pick loop: command out, ack, replan, plan drawn. */
export interface PickProbe {
  object: string;
  seq: number;
  sentAt: number;
  ackAt: number | null;
  replanAt: number | null;
  planAt: number | null;
  renderedAt: number | null;
}

const FEED_CAP = 300;

export class ConsoleModel {
  phase: "connecting" | "live" | "ended" = "connecting";
  domain = "";
  sessionId = "";
  speed = 1;
  clock = 0;
  entities: Record<string, unknown[]> = { regions: [], agents: [], objects: [] };
  snapshot: Record<string, unknown> | null = null;
  plan: PlanView | null = null;
  feed: FeedItem[] = [];
  metrics: MetricsView | null = null;
  errors: string[] = [];
  results: CommandResult[] = [];
  replans = 0;
  goalReached = false;
  activeByAgent = new Map<string, Record<string, unknown> | null>();
  pickProbe: PickProbe | null = null;

  readonly outbox = new Outbox();
  private pending = new Map<number, { type: string; payload: Record<string, unknown> }>();
  private lastServerSeq: number | null = null;
  private readonly now: () => number;

  constructor(now: () => number = () => Date.now()) {
    this.now = now;
  }

  // -- outbound ------------------------------------------------------

  command(type: string, payload: Record<string, unknown> = {}): WireMessage {
    const message = this.outbox.make(type, payload);
    this.pending.set(message.seq, { type, payload });
    if (type === "human_action" && typeof payload["object"] === "string") {
      this.pickProbe = {
        object: payload["object"],
        seq: message.seq,
        sentAt: this.now(),
        ackAt: null,
        replanAt: null,
        planAt: null,
        renderedAt: null,
      };
    }
    return message;
  }

  pick(object: string): WireMessage {
    return this.command("human_action", { template: "pick", object });
  }

  pullTool(): WireMessage {
    return this.command("pull_tool");
  }

  idleToggle(flag: boolean): WireMessage {
    return this.command("idle_toggle", { flag });
  }

  pause(): WireMessage {
    return this.command("pause");
  }

  resume(): WireMessage {
    return this.command("resume");
  }

  setSpeed(scale: number): WireMessage {
    return this.command("speed", { scale });
  }

  /** Stamp the probe once the refreshed plan is actually on screen. */
  markPlanRendered(): void {
    const probe = this.pickProbe;
    if (probe && probe.planAt !== null && probe.renderedAt === null) {
      probe.renderedAt = this.now();
    }
  }

  /** Wall milliseconds from pick sent to refreshed plan rendered. */
  pickLatencyMs(): number | null {
    const probe = this.pickProbe;
    if (!probe || probe.renderedAt === null) return null;
    return probe.renderedAt - probe.sentAt;
  }

  // -- inbound -------------------------------------------------------

  ingest(message: WireMessage): void {
    if (this.lastServerSeq !== null && message.seq <= this.lastServerSeq) {
      this.errors.push(
        `server seq went backwards: ${message.seq} after ${this.lastServerSeq}`,
      );
    }
    this.lastServerSeq = message.seq;
    if (message.session_id) this.sessionId = message.session_id;
    const p = message.payload;
    switch (message.type) {
      case "hello":
        this.phase = "live";
        this.domain = String(p["domain"] ?? "");
        this.speed = Number(p["speed"] ?? 1);
        this.clock = Number(p["clock"] ?? 0);
        this.entities = (p["entities"] ?? this.entities) as Record<string, unknown[]>;
        break;
      case "state":
        this.snapshot = p;
        this.clock = Number(p["clock"] ?? this.clock);
        break;
      case "plan":
        this.plan = {
          generation: Number(p["generation"] ?? 0),
          steps: (p["steps"] ?? []) as PlanStep[],
          completed: new Set((p["completed"] ?? []) as number[]),
        };
        if (this.pickProbe && this.pickProbe.replanAt !== null) {
          this.pickProbe.planAt = this.pickProbe.planAt ?? this.now();
        }
        break;
      case "metrics":
        this.metrics = {
          t: Number(p["t"] ?? 0),
          human_idle: Number(p["human_idle"] ?? 0),
          robot_idle: Number(p["robot_idle"] ?? 0),
          functional_delay: Number(p["functional_delay"] ?? 0),
          concurrent_activity: Number(p["concurrent_activity"] ?? 0),
        };
        break;
      case "ack":
      case "reject":
        this.settle(message.type === "ack", p);
        break;
      case "error":
        this.errors.push(String(p["error"] ?? "unknown server error"));
        break;
      case "heartbeat":
        this.clock = Number(p["t"] ?? this.clock);
        break;
      case "goal_reached":
        this.goalReached = true;
        this.phase = "ended";
        this.pushFeed(message.type, p);
        break;
      default:
        this.pushFeed(message.type, p);
        break;
    }
  }

  private pushFeed(kind: string, p: Record<string, unknown>): void {
    const item: FeedItem = {
      t: Number(p["t"] ?? this.clock),
      kind,
      agent: (p["agent"] ?? null) as string | null,
      data: (p["data"] ?? {}) as Record<string, unknown>,
    };
    this.clock = item.t;
    this.feed.push(item);
    if (this.feed.length > FEED_CAP) this.feed.shift();
    if (kind === "replan") {
      this.replans += 1;
      if (this.pickProbe && this.pickProbe.ackAt !== null) {
        this.pickProbe.replanAt = this.pickProbe.replanAt ?? this.now();
      }
    }
    if (kind === "action_start" && item.agent) {
      if (this.activeByAgent.get(item.agent)) {
        this.errors.push(
          `protocol invariant broken: ${item.agent} started an action while one was active`,
        );
      }
      this.activeByAgent.set(item.agent, (item.data["action"] ?? {}) as Record<string, unknown>);
    }
    if (kind === "action_end" && item.agent) {
      this.activeByAgent.set(item.agent, null);
      if (item.data["status"] === "ok") {
        this.applyGrip(item.agent, (item.data["action"] ?? {}) as Record<string, unknown>);
      }
    }
  }

  /** Keep the object table's held-by column live from grasp/release ends. */
  private applyGrip(agent: string, action: Record<string, unknown>): void {
    const template = action["template"];
    const object = action["object"];
    if (typeof object !== "string") return;
    if (template !== "grasp" && template !== "release") return;
    const objects = (this.snapshot?.["objects"] ?? null) as Record<
      string,
      Record<string, unknown>
    > | null;
    const rec = objects?.[object];
    if (!rec) return;
    const effector = typeof action["effector"] === "string" ? action["effector"] : "?";
    const ref = `${agent}.${effector}`;
    const held = new Set((rec["grasped_by"] ?? []) as string[]);
    if (template === "grasp") {
      held.add(ref);
    } else {
      for (const existing of Array.from(held)) {
        if (existing.startsWith(`${agent}.`)) held.delete(existing);
      }
    }
    rec["grasped_by"] = Array.from(held).sort();
  }

  private settle(ok: boolean, p: Record<string, unknown>): void {
    const seq = Number(p["seq"] ?? -1);
    const sent = this.pending.get(seq);
    if (!sent) {
      this.errors.push(`reply for unknown command seq ${seq}`);
      return;
    }
    this.pending.delete(seq);
    let reason: string;
    let violations: CommandResult["violations"] = [];
    if (ok) {
      reason = String(p["reason"] ?? "");
    } else {
      const violation = (p["violation"] ?? {}) as Record<string, unknown>;
      reason = String(violation["reason"] ?? "");
      violations = (violation["violations"] ?? []) as CommandResult["violations"];
    }
    this.results.push({ seq, type: sent.type, ok, reason, violations });
    if (this.results.length > 50) this.results.shift();
    const probe = this.pickProbe;
    if (probe && seq === probe.seq) {
      if (ok) probe.ackAt = this.now();
      else this.pickProbe = null;
    }
  }
}
