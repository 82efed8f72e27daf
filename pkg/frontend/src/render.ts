// Canvas 2D rendering: top-down map plus two signal strips that share a
// time axis. No client-side prediction; everything drawn comes from the
// ViewModel's last received state.

import { SessionInfo, Snapshot } from "./protocol.js";
import { SignalSample, ViewModel, SIGNAL_WINDOW_S } from "./viewmodel.js";

const COLORS = {
  wall: "#3a3f4a",
  floor: "#14161c",
  grid: "#20242e",
  robot: "#6ee7ff",
  heading: "#e8f6ff",
  goal: "#ffd166",
  waypoint: "#8d93a5",
  decision: "#f4d35e",
  plan: "#41d18c",
  force: "#63b3ff",
  accel: "#ff9a62",
  left: "#41d18c",
  right: "#ff6b81",
  text: "#c7cddb",
};

export function drawMap(ctx: CanvasRenderingContext2D, vm: ViewModel,
                        width: number, height: number): void {
  ctx.fillStyle = COLORS.floor;
  ctx.fillRect(0, 0, width, height);
  const info = vm.info;
  if (!info) return;
  const rows = info.map.rows;
  const nr = rows.length;
  const nc = rows[0]?.length ?? 0;
  if (!nr || !nc) return;
  const res = info.map.resolution;
  const worldW = nc * res;
  const worldH = nr * res;
  const scale = Math.min(width / worldW, height / worldH);
  const ox = (width - worldW * scale) / 2;
  const oy = (height - worldH * scale) / 2;
  const toPx = (x: number, y: number): [number, number] => [
    ox + (x - info.map.origin[0]) * scale,
    oy + (worldH - (y - info.map.origin[1])) * scale,
  ];

  ctx.fillStyle = COLORS.wall;
  const cell = res * scale + 0.5;
  for (let r = 0; r < nr; r++) {
    for (let c = 0; c < nc; c++) {
      if (rows[r][c] === "#") {
        ctx.fillRect(ox + c * res * scale, oy + r * res * scale, cell, cell);
      }
    }
  }

  for (const dp of info.map.decision_points) {
    const [px, py] = toPx(dp.x, dp.y);
    ctx.strokeStyle = COLORS.decision;
    ctx.lineWidth = 2;
    ctx.beginPath();
    ctx.arc(px, py, dp.radius * scale, 0, Math.PI * 2);
    ctx.stroke();
    ctx.fillStyle = COLORS.decision;
    ctx.font = "12px system-ui";
    ctx.fillText(dp.name, px + 6, py - 6);
  }

  const snap = vm.snapshot;
  for (const [name, [wx, wy]] of Object.entries(info.map.waypoints)) {
    const [px, py] = toPx(wx, wy);
    const isGoal = snap ? snap.goal === name : info.goal === name;
    ctx.fillStyle = isGoal ? COLORS.goal : COLORS.waypoint;
    ctx.beginPath();
    ctx.arc(px, py, isGoal ? 7 : 4, 0, Math.PI * 2);
    ctx.fill();
    ctx.fillStyle = COLORS.text;
    ctx.font = "12px system-ui";
    ctx.fillText(name, px + 8, py + 4);
  }

  if (snap) {
    if (snap.plan && snap.plan.poses.length) {
      ctx.strokeStyle = COLORS.plan;
      ctx.lineWidth = 1.5;
      ctx.beginPath();
      const [sx, sy] = toPx(snap.pose[0], snap.pose[1]);
      ctx.moveTo(sx, sy);
      for (const [x, y] of snap.plan.poses) {
        const [px, py] = toPx(x, y);
        ctx.lineTo(px, py);
      }
      ctx.stroke();
    }
    const [rx, ry] = toPx(snap.pose[0], snap.pose[1]);
    const th = snap.pose[2];
    ctx.fillStyle = COLORS.robot;
    ctx.beginPath();
    ctx.arc(rx, ry, 7, 0, Math.PI * 2);
    ctx.fill();
    ctx.strokeStyle = COLORS.heading;
    ctx.lineWidth = 2;
    ctx.beginPath();
    ctx.moveTo(rx, ry);
    ctx.lineTo(rx + Math.cos(th) * 14, ry - Math.sin(th) * 14);
    ctx.stroke();
    if (snap.decision_zone) {
      ctx.fillStyle = COLORS.decision;
      ctx.font = "13px system-ui";
      ctx.fillText(`decision zone: ${snap.decision_zone}`, 10, 18);
    }
  }
}

function drawStrip(ctx: CanvasRenderingContext2D, samples: SignalSample[],
                   key: "force" | "accel", color: string, y0: number,
                   h: number, width: number, yScale: number,
                   markers: { t: number; direction: string }[]): void {
  ctx.strokeStyle = COLORS.grid;
  ctx.lineWidth = 1;
  ctx.beginPath();
  ctx.moveTo(0, y0 + h / 2);
  ctx.lineTo(width, y0 + h / 2);
  ctx.stroke();
  if (!samples.length) return;
  const t1 = samples[samples.length - 1].t;
  const t0 = t1 - SIGNAL_WINDOW_S;
  const toX = (t: number) => ((t - t0) / SIGNAL_WINDOW_S) * width;
  const toY = (v: number) =>
    y0 + h / 2 - Math.max(-1, Math.min(1, v / yScale)) * (h / 2 - 2);
  ctx.strokeStyle = color;
  ctx.lineWidth = 1.5;
  ctx.beginPath();
  let started = false;
  for (const s of samples) {
    const x = toX(s.t);
    const y = toY(s[key]);
    if (!started) {
      ctx.moveTo(x, y);
      started = true;
    } else {
      ctx.lineTo(x, y);
    }
  }
  ctx.stroke();
  for (const m of markers) {
    if (m.t < t0) continue;
    ctx.strokeStyle = m.direction === "LEFT" ? COLORS.left : COLORS.right;
    ctx.setLineDash([4, 3]);
    ctx.beginPath();
    ctx.moveTo(toX(m.t), y0);
    ctx.lineTo(toX(m.t), y0 + h);
    ctx.stroke();
    ctx.setLineDash([]);
  }
}

export function drawSignals(ctx: CanvasRenderingContext2D, vm: ViewModel,
                            width: number, height: number): void {
  ctx.fillStyle = COLORS.floor;
  ctx.fillRect(0, 0, width, height);
  const h = height / 2 - 4;
  const markers = vm.tugMarkers();
  drawStrip(ctx, vm.signals, "force", COLORS.force, 0, h, width, 1.0, markers);
  drawStrip(ctx, vm.signals, "accel", COLORS.accel, h + 8, h, width, 2.5, markers);
  ctx.fillStyle = COLORS.force;
  ctx.font = "11px system-ui";
  ctx.fillText("estimated lateral force (m/s)", 6, 12);
  ctx.fillStyle = COLORS.accel;
  ctx.fillText("measured lateral acceleration (m/s^2)", 6, h + 20);
}
