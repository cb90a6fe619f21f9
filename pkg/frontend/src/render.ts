/** HTML rendering: pure functions from model state to markup strings.
 *
 * Nothing here touches the document, so the whole visual layer is
 * testable as string in, string out. main.ts owns the actual DOM writes.
 */

import { ConsoleModel, FeedItem, PlanStep } from "./model.js";

export function escapeHtml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

function fmtClock(t: number): string {
  return `${t.toFixed(1)}s`;
}

export function describeStep(step: PlanStep): string {
  const bits: string[] = [step.template, step.agent];
  if (typeof step["object"] === "string") bits.push(String(step["object"]));
  if (typeof step["perceive_kind"] === "string") bits.push(String(step["perceive_kind"]));
  const target = step["target"] as { region?: string } | undefined;
  if (target && typeof target.region === "string") bits.push(`to ${target.region}`);
  const wait = step["wait_condition"] as { name?: string } | undefined;
  if (wait && typeof wait.name === "string") bits.push(`until ${wait.name}`);
  if (typeof step["edit"] === "string") bits.push(String(step["edit"]));
  return bits.join(" ");
}

export function renderHeader(model: ConsoleModel): string {
  const status = model.goalReached ? "goal reached" : model.phase;
  return (
    `<span class="domain">${escapeHtml(model.domain || "connecting")}</span>` +
    ` <span class="clock">${fmtClock(model.clock)}</span>` +
    ` <span class="speed">x${model.speed}</span>` +
    ` <span class="status status-${escapeHtml(status)}">${escapeHtml(status)}</span>` +
    ` <span class="session">${escapeHtml(model.sessionId)}</span>`
  );
}

export function renderPlan(model: ConsoleModel): string {
  const plan = model.plan;
  if (!plan) return `<p class="empty">no plan yet</p>`;
  const rows = plan.steps
    .map((step) => {
      const done = plan.completed.has(step.index);
      const cls = done ? "step done" : "step";
      return (
        `<li class="${cls}" data-step="${step.index}">` +
        `${escapeHtml(describeStep(step))}</li>`
      );
    })
    .join("");
  return (
    `<h2>plan <span class="generation">gen ${plan.generation}</span>` +
    ` <span class="progress">${plan.completed.size}/${plan.steps.length}</span></h2>` +
    `<ol class="plan">${rows}</ol>`
  );
}

export function renderAgents(model: ConsoleModel): string {
  const agents = (model.entities["agents"] ?? []) as { name: string; kind: string }[];
  const rows = agents
    .map((agent) => {
      const active = model.activeByAgent.get(agent.name);
      const doing = active
        ? describeStep(active as unknown as PlanStep)
        : "idle";
      return (
        `<tr><td>${escapeHtml(agent.name)}</td>` +
        `<td>${escapeHtml(agent.kind)}</td>` +
        `<td class="doing">${escapeHtml(doing)}</td></tr>`
      );
    })
    .join("");
  return `<table class="agents"><tr><th>agent</th><th>kind</th><th>doing</th></tr>${rows}</table>`;
}

export function renderObjects(model: ConsoleModel): string {
  const snap = model.snapshot;
  if (!snap) return `<p class="empty">no state yet</p>`;
  const objects = (snap["objects"] ?? {}) as Record<string, Record<string, unknown>>;
  const rows = Object.entries(objects)
    .map(([name, rec]) => {
      const at = (rec["at"] ?? []) as unknown[];
      const held = ((rec["grasped_by"] ?? []) as string[]).join(" ");
      const marks = [
        rec["assembled"] ? "assembled" : "",
        rec["content"] != null ? `holds ${rec["content"]}` : "",
      ]
        .filter(Boolean)
        .join(", ");
      return (
        `<tr><td>${escapeHtml(name)}</td>` +
        `<td>${escapeHtml(String(at[0] ?? "?"))}</td>` +
        `<td>${escapeHtml(held)}</td>` +
        `<td>${escapeHtml(marks)}</td></tr>`
      );
    })
    .join("");
  return `<table class="objects"><tr><th>object</th><th>region</th><th>held by</th><th></th></tr>${rows}</table>`;
}

export function describeFeedItem(item: FeedItem): string {
  const d = item.data;
  const action = d["action"] as PlanStep | undefined;
  switch (item.kind) {
    case "action_start":
      return `${item.agent} starts ${action ? describeStep(action) : "?"}`;
    case "action_end": {
      const status = String(d["status"] ?? "ok");
      const suffix = status === "ok" ? "" : ` (${status})`;
      return `${item.agent} ends ${action ? describeStep(action) : "?"}${suffix}`;
    }
    case "wait_satisfied":
      return `${item.agent} wait over: ${String(d["condition"] ?? "?")}`;
    case "perceive_result":
      return `${item.agent} sensed ${String(d["kind"] ?? "?")}`;
    case "human_event":
      return `${item.agent}: ${String(d["event"] ?? "?")} ${String(d["object"] ?? "")}`.trim();
    case "replan":
      return `replanned (${String(d["reason"] ?? "?")}), ${String(d["steps"] ?? "?")} steps`;
    case "goal_reached":
      return "goal reached";
    default:
      return item.kind;
  }
}

export function renderFeed(model: ConsoleModel, limit = 30): string {
  const items = model.feed.slice(-limit);
  const rows = items
    .map(
      (item) =>
        `<li class="evt evt-${escapeHtml(item.kind)}">` +
        `<span class="t">${fmtClock(item.t)}</span> ` +
        `${escapeHtml(describeFeedItem(item))}</li>`,
    )
    .join("");
  return `<ul class="feed">${rows}</ul>`;
}

export function renderMetrics(model: ConsoleModel): string {
  const m = model.metrics;
  if (!m) return `<p class="empty">no metrics yet</p>`;
  const cell = (label: string, value: number) =>
    `<td><span class="label">${label}</span> ${value.toFixed(1)}%</td>`;
  return (
    `<table class="metrics"><tr>` +
    cell("human idle", m.human_idle) +
    cell("robot idle", m.robot_idle) +
    cell("functional delay", m.functional_delay) +
    cell("concurrent activity", m.concurrent_activity) +
    `</tr></table>`
  );
}

export function renderErrors(model: ConsoleModel): string {
  if (model.errors.length === 0) return "";
  const rows = model.errors
    .slice(-5)
    .map((e) => `<li>${escapeHtml(e)}</li>`)
    .join("");
  return `<ul class="errors">${rows}</ul>`;
}

export function renderResults(model: ConsoleModel, limit = 5): string {
  const rows = model.results
    .slice(-limit)
    .map((r) => {
      const cls = r.ok ? "result ok" : "result rejected";
      const tail = r.ok ? "" : ` [${r.violations.map((v) => v.code).join(", ")}]`;
      return `<li class="${cls}">${escapeHtml(`${r.type}: ${r.reason}${tail}`)}</li>`;
    })
    .join("");
  return `<ul class="results">${rows}</ul>`;
}
