/** Browser entry: connect, render, and forward operator input.
 *
 * The gateway address comes from the `server` query parameter, e.g.
 * `/console/?server=ws://127.0.0.1:7321`; with no parameter the console
 * talks to the host that served it. A dropped connection retries every
 * two seconds, which fits inside the gateway's reconnect grace.
 */

import { GatewayClient, pickableObjects } from "./client.js";
import { ConsoleModel } from "./model.js";
import {
  renderAgents,
  renderErrors,
  renderFeed,
  renderHeader,
  renderMetrics,
  renderObjects,
  renderPlan,
  renderResults,
} from "./render.js";

const RETRY_MS = 2000;

export function sessionUrl(search: string, origin: string): string {
  const raw = new URLSearchParams(search).get("server");
  if (!raw) return origin.replace(/^http/, "ws") + "/session";
  let url = raw;
  if (!/^wss?:/.test(url)) url = "ws://" + url;
  if (!url.endsWith("/session")) url = url.replace(/\/$/, "") + "/session";
  return url;
}

function section(id: string): HTMLElement {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing #${id} in index.html`);
  return el;
}

function renderAll(model: ConsoleModel): void {
  section("header").innerHTML = renderHeader(model);
  section("plan").innerHTML = renderPlan(model);
  model.markPlanRendered();
  section("agents").innerHTML = renderAgents(model);
  section("objects").innerHTML = renderObjects(model);
  section("feed").innerHTML = renderFeed(model);
  section("metrics").innerHTML = renderMetrics(model);
  section("errors").innerHTML = renderErrors(model);
  section("results").innerHTML = renderResults(model);
  refreshPickChoices(model);
}

function refreshPickChoices(model: ConsoleModel): void {
  const select = section("pick-object") as HTMLSelectElement;
  const current = select.value;
  const choices = pickableObjects(model);
  const have = Array.from(select.options).map((o) => o.value);
  if (have.length === choices.length && have.every((v, i) => v === choices[i])) {
    return;
  }
  select.innerHTML = "";
  for (const name of choices) {
    const option = document.createElement("option");
    option.value = name;
    option.textContent = name;
    select.appendChild(option);
  }
  if (choices.includes(current)) select.value = current;
}

function start(): void {
  const url = sessionUrl(location.search, location.origin);
  const model = new ConsoleModel();
  let socket: WebSocket | null = null;
  let frame = 0;

  const client = new GatewayClient((text) => {
    if (socket && socket.readyState === WebSocket.OPEN) socket.send(text);
  }, model);

  client.onChange = (m) => {
    if (frame) return;
    frame = requestAnimationFrame(() => {
      frame = 0;
      renderAll(m);
    });
  };

  const connect = () => {
    socket = new WebSocket(url);
    socket.onmessage = (event) => client.handleText(String(event.data));
    socket.onclose = () => {
      if (model.phase !== "ended") {
        model.errors.push("connection lost, retrying");
        client.onChange(model);
        setTimeout(connect, RETRY_MS);
      }
    };
  };

  section("pick-go").addEventListener("click", () => {
    const select = section("pick-object") as HTMLSelectElement;
    if (select.value) client.pick(select.value);
  });
  section("pull-go").addEventListener("click", () => client.pullTool());
  section("idle-flag").addEventListener("change", (event) => {
    client.idleToggle((event.target as HTMLInputElement).checked);
  });
  section("pause-go").addEventListener("click", () => client.pause());
  section("resume-go").addEventListener("click", () => client.resume());
  section("speed-go").addEventListener("click", () => {
    const input = section("speed-scale") as HTMLInputElement;
    const scale = Number(input.value);
    if (scale > 0) client.setSpeed(scale);
  });

  connect();
}

if (typeof document !== "undefined" && document.getElementById("app")) {
  start();
}
