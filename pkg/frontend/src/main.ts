// Cockpit entry point: wires the connection, view model, canvases, tug
// buttons, arrow keys, and the event feed.

import { encodeControl, encodeTug } from "./protocol.js";
import { Connection } from "./net.js";
import { drawMap, drawSignals } from "./render.js";
import { ViewModel } from "./viewmodel.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

const params = new URLSearchParams(location.search);
const defaultUrl = `ws://${location.hostname || "127.0.0.1"}:8765`;
const url = params.get("ws") ?? defaultUrl;

const vm = new ViewModel();
const conn = new Connection(url);

const mapCanvas = el<HTMLCanvasElement>("map");
const sigCanvas = el<HTMLCanvasElement>("signals");
const feed = el<HTMLUListElement>("events");
const status = el<HTMLSpanElement>("status");
const stats = el<HTMLSpanElement>("stats");
const leftBtn = el<HTMLButtonElement>("tug-left");
const rightBtn = el<HTMLButtonElement>("tug-right");
const pauseBtn = el<HTMLButtonElement>("pause");
const resumeBtn = el<HTMLButtonElement>("resume");
const resetBtn = el<HTMLButtonElement>("reset");

let renderedEvents = 0;

conn.onMessage = (raw, wallNow) => vm.apply(raw, wallNow);
conn.onState = (state) => {
  if (state !== "open") {
    vm.reset();
    renderedEvents = 0;
    feed.innerHTML = "";
  }
};
conn.connect();

function sendTug(direction: "LEFT" | "RIGHT"): void {
  if (conn.send(encodeTug(direction))) {
    vm.markTugSent(direction, performance.now());
  }
}

leftBtn.onclick = () => sendTug("LEFT");
rightBtn.onclick = () => sendTug("RIGHT");
pauseBtn.onclick = () => conn.send(encodeControl("pause"));
resumeBtn.onclick = () => conn.send(encodeControl("resume"));
resetBtn.onclick = () => conn.send(encodeControl("reset"));
window.addEventListener("keydown", (ev) => {
  if (ev.key === "ArrowLeft") sendTug("LEFT");
  if (ev.key === "ArrowRight") sendTug("RIGHT");
});

function renderFeed(): void {
  while (renderedEvents < vm.events.length) {
    const ev = vm.events[renderedEvents++];
    const li = document.createElement("li");
    const extra = Object.entries(ev)
      .filter(([k]) => !["kind", "sim_t", "seq"].includes(k))
      .map(([k, v]) => `${k}=${v}`)
      .join(" ");
    li.textContent = `[${ev.sim_t.toFixed(2)}s] ${ev.kind} ${extra}`;
    li.className = `ev-${ev.kind}`;
    feed.prepend(li);
  }
  while (feed.childElementCount > 60) {
    feed.removeChild(feed.lastChild as Node);
  }
}

function frame(): void {
  const now = performance.now();
  const mapCtx = mapCanvas.getContext("2d")!;
  const sigCtx = sigCanvas.getContext("2d")!;
  drawMap(mapCtx, vm, mapCanvas.width, mapCanvas.height);
  drawSignals(sigCtx, vm, sigCanvas.width, sigCanvas.height);

  const stale = vm.isStale(now);
  const mode = vm.snapshot?.mode ?? "-";
  status.textContent = conn.state === "open"
    ? (stale ? "STALE (no snapshots)" : `live | mode ${mode}`)
    : `${conn.state} (retrying)`;
  status.className = stale || conn.state !== "open" ? "bad" : "good";
  stats.textContent =
    `goal ${vm.snapshot?.goal ?? "-"} | sim ${vm.snapshot?.sim_t?.toFixed(1) ?? "-"}s` +
    ` | gaps ${vm.seqGaps} | warn ${vm.warnings + vm.decodeFailures}`;

  const hl = vm.activeHighlight(now);
  leftBtn.classList.toggle("active", hl === "LEFT");
  rightBtn.classList.toggle("active", hl === "RIGHT");

  renderFeed();
  requestAnimationFrame(frame);
}

requestAnimationFrame(frame);
