import init, { labelledScan, iscShiftResponse, corridorComparison } from "./pkg/slam_wasm.js";

const $ = (id) => document.getElementById(id);

function fitTransform(canvas, xs, ys, pad = 16) {
  const minX = Math.min(...xs), maxX = Math.max(...xs);
  const minY = Math.min(...ys), maxY = Math.max(...ys);
  const s = Math.min((canvas.width - 2 * pad) / (maxX - minX || 1), (canvas.height - 2 * pad) / (maxY - minY || 1));
  return (x, y) => [pad + (x - minX) * s, canvas.height - pad - (y - minY) * s];
}

function drawScan() {
  const wi = Number($("scan-wi").value);
  $("scan-wi-val").textContent = wi.toFixed(1);
  const data = labelledScan($("scan-scene").value, Number($("scan-x").value), Number($("scan-y").value),
    Number($("scan-yaw").value), wi);
  const canvas = $("scan-canvas"), ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const n = data.length / 4;
  const xs = [], ys = [];
  for (let i = 0; i < n; i++) { xs.push(data[4 * i]); ys.push(data[4 * i + 1]); }
  const tf = fitTransform(canvas, xs, ys);
  let edges = 0, planars = 0;
  for (let i = 0; i < n; i++) {
    const [u, v] = tf(xs[i], ys[i]);
    const cls = data[4 * i + 3];
    if (cls === 1) { ctx.fillStyle = "#d62728"; edges++; }
    else if (cls === 2) { ctx.fillStyle = "#1f77b4"; planars++; }
    else {
      const g = Math.round(220 - 140 * Math.min(data[4 * i + 2] / 2, 1));
      ctx.fillStyle = `rgb(${g},${g},${g})`;
    }
    const r = cls ? 2.5 : 1;
    ctx.fillRect(u - r / 2, v - r / 2, r, r);
  }
  const [ox, oy] = tf(0, 0);
  ctx.fillStyle = "#000";
  ctx.beginPath(); ctx.arc(ox, oy, 4, 0, 2 * Math.PI); ctx.fill();
  $("scan-out").textContent = `${n} points, ${edges} edges, ${planars} planars`;
}

function drawIsc() {
  const yaw = Number($("isc-yaw").value);
  $("isc-yaw-val").textContent = yaw;
  const sims = iscShiftResponse($("isc-scene").value, 0, 0, yaw);
  const canvas = $("isc-canvas"), ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const w = canvas.width / sims.length, h = canvas.height - 20;
  let best = 0;
  sims.forEach((s, k) => { if (s > sims[best]) best = k; });
  sims.forEach((s, k) => {
    ctx.fillStyle = k === best ? "#d62728" : "#1f77b4";
    ctx.fillRect(k * w + 1, h - s * h, w - 2, s * h);
  });
  ctx.fillStyle = "#444";
  ctx.fillText("shift 0", 2, canvas.height - 5);
  ctx.fillText(`shift ${sims.length - 1}`, canvas.width - 48, canvas.height - 5);
  const sector = 360 / sims.length;
  $("isc-out").textContent =
    `best shift ${best} (${(best * sector).toFixed(0)}°), similarity ${sims[best].toFixed(3)}; ` +
    `expected shift ${Math.round(yaw / sector) % sims.length}`;
}

function drawComparison(c) {
  const canvas = $("abl-canvas"), ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const series = [[c.truth, "#222"], [c.geometric, "#d62728"], [c.intensity, "#2ca02c"]];
  const xs = [], ys = [];
  for (const [s] of series) for (let i = 0; i < s.length; i += 2) { xs.push(s[i]); ys.push(s[i + 1]); }
  ys.push(-1, 1);
  const tf = fitTransform(canvas, xs, ys);
  for (const [s, color] of series) {
    ctx.strokeStyle = color; ctx.lineWidth = 2; ctx.beginPath();
    for (let i = 0; i < s.length; i += 2) {
      const [u, v] = tf(s[i], s[i + 1]);
      i === 0 ? ctx.moveTo(u, v) : ctx.lineTo(u, v);
    }
    ctx.stroke();
  }
  $("abl-out").textContent =
    `ATE geometry only ${c.ateGeometric.toFixed(2)}%   with intensity ${c.ateIntensity.toFixed(2)}%`;
}

function runComparison() {
  $("abl-out").textContent = "running…";
  $("abl-run").disabled = true;
  // yield so the status text paints before the solver blocks the thread
  setTimeout(() => {
    try {
      const c = corridorComparison(Number($("abl-frames").value), Number($("abl-seed").value));
      drawComparison(c);
      c.free();
    } catch (e) {
      $("abl-out").textContent = String(e);
    } finally {
      $("abl-run").disabled = false;
    }
  }, 20);
}

await init();
$("status").textContent = "Ready.";
for (const id of ["scan-scene", "scan-x", "scan-y", "scan-yaw", "scan-wi"]) $(id).addEventListener("input", drawScan);
for (const id of ["isc-scene", "isc-yaw"]) $(id).addEventListener("input", drawIsc);
$("abl-run").addEventListener("click", runComparison);
drawScan();
drawIsc();
