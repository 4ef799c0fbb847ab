import init, { estimateBox, compareBoxes, gumbelHistogram } from "./pkg/parttrack_demo.js";

await init();

const $ = (id) => document.getElementById(id);

// ---- box from part locations ----
const partsCanvas = $("parts");
const pctx = partsCanvas.getContext("2d");
let points = [];

function drawParts() {
  const { width, height } = partsCanvas;
  pctx.clearRect(0, 0, width, height);
  pctx.fillStyle = "#d22";
  for (let i = 0; i < points.length; i += 2) {
    pctx.fillRect(points[i] - 2, points[i + 1] - 2, 5, 5);
  }
  const sigma = Number($("sigma").value);
  $("sigma-out").textContent = sigma.toFixed(2);
  if (points.length === 0) {
    $("box-out").textContent = "-";
    return;
  }
  try {
    const [cx, cy, w, h] = estimateBox(new Float64Array(points), sigma, $("formula").value);
    pctx.strokeStyle = "#2a2";
    pctx.lineWidth = 2;
    pctx.strokeRect(cx - w / 2, cy - h / 2, w, h);
    $("box-out").textContent = `cx ${cx.toFixed(1)}, cy ${cy.toFixed(1)}, w ${w.toFixed(1)}, h ${h.toFixed(1)}`;
  } catch (e) {
    $("box-out").textContent = String(e);
  }
}

partsCanvas.addEventListener("click", (ev) => {
  points.push(ev.offsetX, ev.offsetY);
  drawParts();
});
$("sigma").addEventListener("input", drawParts);
$("formula").addEventListener("change", drawParts);
$("clear").addEventListener("click", () => {
  points = [];
  drawParts();
});
drawParts();

// ---- GIoU explorer ----
const giouCanvas = $("giou");
const gctx = giouCanvas.getContext("2d");
const boxA = [120, 90, 140, 110];
let centerB = [260, 170];
let dragging = false;

function drawGiou() {
  const { width, height } = giouCanvas;
  const bw = Number($("bw").value);
  const bh = Number($("bh").value);
  const boxB = [centerB[0] - bw / 2, centerB[1] - bh / 2, bw, bh];
  const [iou, giou, hx, hy, hw, hh] = compareBoxes(new Float64Array(boxA), new Float64Array(boxB));
  gctx.clearRect(0, 0, width, height);
  gctx.setLineDash([5, 4]);
  gctx.strokeStyle = "#888";
  gctx.strokeRect(hx, hy, hw, hh);
  gctx.setLineDash([]);
  gctx.fillStyle = "rgba(40, 90, 220, 0.25)";
  gctx.fillRect(...boxA);
  gctx.fillStyle = "rgba(220, 60, 40, 0.25)";
  gctx.fillRect(...boxB);
  $("iou-out").textContent = iou.toFixed(4);
  $("giou-out").textContent = giou.toFixed(4);
}

function moveB(ev) {
  centerB = [ev.offsetX, ev.offsetY];
  drawGiou();
}
giouCanvas.addEventListener("mousedown", (ev) => {
  dragging = true;
  moveB(ev);
});
giouCanvas.addEventListener("mousemove", (ev) => dragging && moveB(ev));
window.addEventListener("mouseup", () => (dragging = false));
$("bw").addEventListener("input", drawGiou);
$("bh").addEventListener("input", drawGiou);
drawGiou();

// ---- Gumbel-softmax sampler ----
const gumbelCanvas = $("gumbel");
const hctx = gumbelCanvas.getContext("2d");
let seed = 1;

function drawGumbel() {
  const { width, height } = gumbelCanvas;
  const tau = Number($("tau").value);
  $("tau-out").textContent = tau.toFixed(2);
  const logits = $("logits").value.split(",").map(Number).filter((v) => Number.isFinite(v));
  const draws = Math.max(1, Math.min(100000, Number($("draws").value) || 1));
  hctx.clearRect(0, 0, width, height);
  if (logits.length === 0) return;
  const out = gumbelHistogram(new Float64Array(logits), tau, draws, BigInt(seed));
  const n = logits.length;
  const slot = width / n;
  const base = height - 20;
  hctx.font = "12px system-ui";
  for (let i = 0; i < n; i++) {
    const frac = out[i] / draws;
    hctx.fillStyle = "#4a7bd0";
    hctx.fillRect(i * slot + 8, base - frac * (base - 10), slot - 16, frac * (base - 10));
    hctx.fillStyle = "#d22";
    hctx.beginPath();
    hctx.arc(i * slot + slot / 2, base - out[n + i] * (base - 10), 4, 0, 2 * Math.PI);
    hctx.fill();
    hctx.fillStyle = "#222";
    hctx.fillText(`${logits[i]}`, i * slot + slot / 2 - 8, height - 5);
  }
}

$("tau").addEventListener("input", drawGumbel);
$("logits").addEventListener("change", drawGumbel);
$("draws").addEventListener("change", drawGumbel);
$("resample").addEventListener("click", () => {
  seed += 1;
  drawGumbel();
});
drawGumbel();
