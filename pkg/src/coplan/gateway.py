"""Live session endpoint for driving an interactive scenario over a socket.

One scenario per server process and one operator at a time. The operator
plays the human agent: the server streams the session's plan and events,
and the client answers with announced human actions, pause and resume, or
clock-speed changes. All frames are text, one JSON message per frame,
wrapped in a small versioned envelope (see docs/wire-protocol.md).

The virtual clock runs only while a client is attached; it advances at
wall speed times the configured scale. On disconnect the clock freezes,
and the session can be resumed by reconnecting within a grace window.
"""

import asyncio
import json
import logging
import time
import uuid
from pathlib import Path

from fastapi import FastAPI, WebSocket, WebSocketDisconnect
from fastapi.staticfiles import StaticFiles

from .metrics import MetricsError, build_timeline, fluency
from .sim import EventLog, PolicyKind, Scenario, Session

log = logging.getLogger(__name__)

PROTOCOL_VERSION = "1"
HEARTBEAT_S = 5.0  # wall seconds between heartbeats
RECONNECT_GRACE_S = 60.0  # wall seconds a paused session survives unattached
TICK_S = 0.05  # wall seconds between clock advances
METRICS_EVERY_S = 2.0  # wall seconds between fluency pushes

SERVER_TYPES = frozenset(
    {
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
    }
)
CLIENT_TYPES = frozenset(
    {"human_action", "idle_toggle", "pull_tool", "pause", "resume", "speed"}
)


class FrameError(ValueError):
    """Inbound frame that cannot be accepted; the connection survives it."""


def encode(message: dict) -> str:
    return json.dumps(message, separators=(",", ":"), ensure_ascii=True)


def decode(text: str, known: frozenset = CLIENT_TYPES) -> dict:
    """Parse one frame; unknown fields are dropped for forward compatibility."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FrameError(f"malformed frame: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise FrameError("malformed frame: not an object")
    if "type" not in raw:
        raise FrameError("missing type field")
    version = raw.get("protocol_version")
    if version != PROTOCOL_VERSION:
        raise FrameError(f"protocol version mismatch: {version!r}")
    kind = raw["type"]
    if kind not in known:
        raise FrameError(f"unknown type {kind!r}")
    payload = raw.get("payload", {})
    if not isinstance(payload, dict):
        raise FrameError("payload must be an object")
    return {
        "type": kind,
        "session_id": raw.get("session_id", ""),
        "seq": raw.get("seq"),
        "payload": payload,
        "protocol_version": version,
    }


def _entities_record(decl) -> dict:
    return {
        "regions": [
            {"name": r.name, "bounds": list(r.bounds), "visible": r.visible}
            for r in decl.regions
        ],
        "agents": [
            {
                "name": a.name,
                "kind": a.kind.value,
                "effectors": list(a.effectors),
                "reach": sorted(a.reach),
                "capabilities": sorted(a.capabilities),
            }
            for a in decl.agents
        ],
        "objects": [
            {
                "name": o.name,
                "region": o.location.region,
                "coords": list(o.location.coords),
                "kind": o.kind,
                "content": o.content,
            }
            for o in decl.objects
        ],
    }


def _violation_records(violations) -> list[dict]:
    return [
        {
            "code": v.code,
            "families": sorted(f.value for f in v.families),
            "message": v.message,
        }
        for v in violations
    ]


class SessionHost:
    """Owns one interactive session and its wall-scaled virtual clock.

    Every method must be called from the server's event loop; the session
    itself is not thread safe.
    """

    def __init__(self, scenario: Scenario, speed: float = 1.0):
        if scenario.policy.kind is not PolicyKind.INTERACTIVE:
            raise ValueError("the gateway hosts interactive scenarios only")
        if speed <= 0:
            raise ValueError("speed must be positive")
        self.session = Session(scenario)
        self.session.start()
        self.session_id = f"{self.session.domain.name}-{uuid.uuid4().hex[:8]}"
        self.speed = speed
        self._virtual = 0.0  # virtual time when the anchor was set
        self._anchor: float | None = None  # wall time at resume; None = paused
        self._out_seq = 0
        self._client_seq: int | None = None
        self.client_attached = False
        self.expired = False
        self.detached_at: float | None = None  # wall time of last disconnect
        self._cursor = 0  # session events already turned into frames
        self._plan_generation = 0

    # -- clock ----------------------------------------------------------

    @property
    def paused(self) -> bool:
        return self._anchor is None

    def now(self) -> float:
        if self._anchor is None:
            return self._virtual
        return self._virtual + (time.monotonic() - self._anchor) * self.speed

    def pause_clock(self) -> None:
        if self._anchor is not None:
            self._virtual = self.now()
            self._anchor = None

    def resume_clock(self) -> None:
        if self._anchor is None:
            self._anchor = time.monotonic()

    def set_speed(self, scale: float) -> None:
        if scale <= 0:
            raise ValueError("speed must be positive")
        self._virtual = self.now()
        if self._anchor is not None:
            self._anchor = time.monotonic()
        self.speed = scale

    # -- framing --------------------------------------------------------

    def frame(self, kind: str, payload: dict) -> str:
        self._out_seq += 1
        return encode(
            {
                "type": kind,
                "session_id": self.session_id,
                "seq": self._out_seq,
                "payload": payload,
                "protocol_version": PROTOCOL_VERSION,
            }
        )

    def take_client_seq(self, seq) -> None:
        if not isinstance(seq, int):
            raise FrameError("seq must be an integer")
        if self._client_seq is not None and seq <= self._client_seq:
            raise FrameError(
                f"seq must increase: got {seq} after {self._client_seq}"
            )
        self._client_seq = seq

    def handshake_frames(self) -> list[str]:
        session = self.session
        hello = {
            "domain": session.domain.name,
            "protocol_version": PROTOCOL_VERSION,
            "entities": _entities_record(session.decl),
            "speed": self.speed,
            "clock": session.clock,
        }
        return [
            self.frame("hello", hello),
            self.frame("state", session.state_snapshot()),
            self.frame("plan", session.plan_export()),
        ]

    def advance(self) -> None:
        if not self.paused:
            self.session.advance_until(self.now())

    def drain_frames(self) -> list[str]:
        """Wire frames for session events not yet streamed."""
        out = []
        events = self.session.events
        while self._cursor < len(events):
            event = events[self._cursor]
            self._cursor += 1
            payload = {
                "t": event["t"],
                "agent": event["agent"],
                "data": event["payload"],
            }
            out.append(self.frame(event["kind"], payload))
            if event["kind"] == "replan":
                out.append(self.frame("plan", self.session.plan_export()))
        return out

    def metrics_frame(self) -> str | None:
        # a live log usually ends inside someone's action; measure the
        # longest prefix in which every started action has finished
        log = self.session.event_log()
        open_actions = 0
        cut = 0
        for i, event in enumerate(log.events):
            if event["kind"] == "action_start":
                open_actions += 1
            elif event["kind"] == "action_end":
                open_actions -= 1
            if open_actions == 0:
                cut = i + 1
        if cut == 0:
            return None
        try:
            closed = EventLog(log.scenario, log.events[:cut], log.final_state)
            report = fluency(build_timeline(closed))
        except (MetricsError, ValueError):
            return None
        return self.frame(
            "metrics",
            {
                "t": self.session.clock,
                "human_idle": report.human_idle,
                "robot_idle": report.robot_idle,
                "functional_delay": report.functional_delay,
                "concurrent_activity": report.concurrent_activity,
            },
        )

    # -- operator input -------------------------------------------------

    def handle(self, message: dict) -> tuple[str, dict]:
        """Apply one decoded client message; returns (reply kind, payload)."""
        kind = message["type"]
        seq = message["seq"]
        if kind == "pause":
            self.pause_clock()
            return "ack", {"seq": seq, "reason": "clock paused"}
        if kind == "resume":
            self.resume_clock()
            return "ack", {"seq": seq, "reason": "clock running"}
        if kind == "speed":
            scale = message["payload"].get("scale")
            if not isinstance(scale, (int, float)) or scale <= 0:
                return "reject", {
                    "seq": seq,
                    "violation": {"reason": f"invalid speed scale {scale!r}"},
                }
            self.set_speed(float(scale))
            return "ack", {"seq": seq, "reason": f"speed set to {scale}"}
        event = self._as_inject(kind, message["payload"])
        if isinstance(event, str):
            return "reject", {"seq": seq, "violation": {"reason": event}}
        result = self.session.inject_human_event(event)
        if result.accepted:
            return "ack", {"seq": seq, "reason": result.reason}
        return "reject", {
            "seq": seq,
            "violation": {
                "reason": result.reason,
                "violations": _violation_records(result.violations),
            },
        }

    def _as_inject(self, kind: str, payload: dict) -> dict | str:
        if kind == "pull_tool":
            return {"event": "pull_tool"}
        if kind == "idle_toggle":
            return {"event": "idle_toggle", "idle": bool(payload.get("flag", True))}
        if kind == "human_action":
            template = payload.get("template")
            if template in ("pick", "grasp"):
                return {"event": "pick", "object": payload.get("object")}
            return f"unsupported human action template {template!r}"
        return f"unhandled message type {kind!r}"


def build_app(
    scenario: Scenario,
    speed: float = 1.0,
    console_dir: str | Path | None = None,
    heartbeat_s: float = HEARTBEAT_S,
    reconnect_grace_s: float = RECONNECT_GRACE_S,
    metrics_every_s: float = METRICS_EVERY_S,
) -> FastAPI:
    host = SessionHost(scenario, speed=speed)
    app = FastAPI(title="coplan session gateway")
    app.state.host = host

    @app.get("/")
    def describe():
        return {
            "service": "coplan-gateway",
            "protocol_version": PROTOCOL_VERSION,
            "session_id": host.session_id,
            "domain": host.session.domain.name,
            "endpoints": {"session": "/session", "console": "/console"},
        }

    @app.websocket("/session")
    async def session_socket(ws: WebSocket):
        await ws.accept()
        if host.client_attached:
            await ws.send_text(
                host.frame("error", {"error": "session busy: one client at a time"})
            )
            await ws.close(code=1008)
            return
        if host.detached_at is not None:
            if time.monotonic() - host.detached_at > reconnect_grace_s:
                host.expired = True
        if host.expired:
            await ws.send_text(
                host.frame("error", {"error": "session expired after disconnect"})
            )
            await ws.close(code=1008)
            return
        host.detached_at = None
        host.client_attached = True
        for text in host.handshake_frames():
            await ws.send_text(text)
        host.resume_clock()

        async def pump():
            last_beat = time.monotonic()
            last_metrics = time.monotonic()
            while True:
                await asyncio.sleep(TICK_S)
                host.advance()
                for text in host.drain_frames():
                    await ws.send_text(text)
                now = time.monotonic()
                if now - last_metrics >= metrics_every_s:
                    last_metrics = now
                    metrics = host.metrics_frame()
                    if metrics is not None:
                        await ws.send_text(metrics)
                if now - last_beat >= heartbeat_s:
                    last_beat = now
                    await ws.send_text(
                        host.frame("heartbeat", {"t": host.session.clock})
                    )

        pump_task = asyncio.create_task(pump())
        try:
            while True:
                text = await ws.receive_text()
                try:
                    message = decode(text, CLIENT_TYPES)
                    host.take_client_seq(message["seq"])
                except FrameError as exc:
                    await ws.send_text(host.frame("error", {"error": str(exc)}))
                    continue
                # deliver everything that happened before the command so the
                # reply and its consequences stream in session order
                host.advance()
                for out in host.drain_frames():
                    await ws.send_text(out)
                kind, payload = host.handle(message)
                reply = host.frame(kind, payload)
                await ws.send_text(reply)
                for out in host.drain_frames():
                    await ws.send_text(out)
        except WebSocketDisconnect:
            pass
        finally:
            pump_task.cancel()
            host.client_attached = False
            host.pause_clock()
            if not host.session.finished:
                host.detached_at = time.monotonic()

    root = Path(console_dir) if console_dir else Path.cwd() / "frontend" / "dist"
    if root.is_dir():
        app.mount("/console", StaticFiles(directory=root, html=True), name="console")
    return app


def serve(
    scenario: Scenario,
    port: int = 7321,
    speed: float = 1.0,
    console_dir: str | Path | None = None,
) -> None:
    """Run the gateway until interrupted (blocking)."""
    import uvicorn

    app = build_app(scenario, speed=speed, console_dir=console_dir)
    log.info("serving %s on port %d", app.state.host.session_id, port)
    uvicorn.run(app, host="127.0.0.1", port=port, log_level="warning")
