// Expects the wasm-bindgen output (`--target web`) in ./pkg.
import init, { Episode } from "./pkg/pitchpilot_demo.js";

const LABELS = ["search", "goto", "align", "dribble"];
const BINS = ["0-50", "51-101", "102-152", "153-203", "204-255"];
const $ = (id) => document.getElementById(id);

let episode = null;
let path = [];

function fieldToCanvas(x, y) {
  // field is 9 m x 6 m, canvas 540 x 360 px
  return [(x + 4.5) * 60, (3 - y) * 60];
}

function drawField(tick) {
  const ctx = $("field").getContext("2d");
  ctx.clearRect(0, 0, 540, 360);
  ctx.strokeStyle = "#fff";
  ctx.strokeRect(1, 1, 538, 358);
  ctx.beginPath();
  ctx.moveTo(270, 0);
  ctx.lineTo(270, 360);
  ctx.stroke();
  const sign = episode.goal_sign();
  for (const s of [-1, 1]) {
    const [gx, gy] = fieldToCanvas(s * 4.5, 0.75);
    ctx.fillStyle = s === sign ? "#ffd54f" : "#bbb";
    ctx.fillRect(s > 0 ? gx - 6 : gx, gy, 6, 90);
  }
  const trace = (off, colour) => {
    ctx.strokeStyle = colour;
    ctx.beginPath();
    for (let i = 0; i <= tick; i++) {
      const [cx, cy] = fieldToCanvas(path[5 * i + off], path[5 * i + off + 1]);
      i === 0 ? ctx.moveTo(cx, cy) : ctx.lineTo(cx, cy);
    }
    ctx.stroke();
  };
  trace(0, "#90caf9");
  trace(3, "#ffab91");
  const [rx, ry, th] = path.slice(5 * tick, 5 * tick + 3);
  const [cx, cy] = fieldToCanvas(rx, ry);
  ctx.fillStyle = "#1565c0";
  ctx.beginPath();
  ctx.arc(cx, cy, 8, 0, 2 * Math.PI);
  ctx.fill();
  ctx.strokeStyle = "#fff";
  ctx.beginPath();
  ctx.moveTo(cx, cy);
  ctx.lineTo(cx + 14 * Math.cos(th), cy - 14 * Math.sin(th));
  ctx.stroke();
  const [bx, by] = fieldToCanvas(path[5 * tick + 3], path[5 * tick + 4]);
  ctx.fillStyle = "#e64a19";
  ctx.beginPath();
  ctx.arc(bx, by, 4, 0, 2 * Math.PI);
  ctx.fill();
}

function blit(canvas, pixels, offset) {
  const { width, height } = canvas;
  const ctx = canvas.getContext("2d");
  const img = ctx.createImageData(width, height);
  for (let i = 0; i < width * height; i++) {
    const v = pixels[offset + i];
    img.data.set([v, v, v, 255], 4 * i);
  }
  ctx.putImageData(img, 0, 0);
}

function drawHistogram(h) {
  const rows = BINS.map((b, i) => {
    const bar = (v) => `<span class="bar" style="width:${Math.round(v * 120)}px"></span> ${v.toFixed(3)}`;
    return `<tr><td>${b}</td><td style="text-align:left">${bar(h[i])}</td><td style="text-align:left">${bar(h[i + 5])}</td></tr>`;
  });
  $("hist").innerHTML = `<tr><th>bin</th><th>top</th><th>bottom</th></tr>${rows.join("")}`;
}

function show(tick) {
  if (!episode) return;
  drawField(tick);
  const px = episode.frames(tick);
  blit($("top"), px, 0);
  blit($("bottom"), px, 160 * 120);
  drawHistogram(episode.histogram(tick));
  const [f, l, t] = episode.command(tick);
  $("readout").textContent =
    `tick ${tick}  state ${LABELS[episode.label(tick)]}  ` +
    `command forward ${f.toFixed(3)} left ${l.toFixed(3)} turn ${t.toFixed(3)}`;
}

function run() {
  const seed = BigInt(Math.max(0, Math.floor(Number($("seed").value) || 0)));
  episode?.free();
  episode = new Episode(seed);
  path = episode.path();
  const n = episode.len();
  $("status").textContent = `${episode.status()} after ${n} ticks (${(n / 30).toFixed(1)} s)`;
  $("tick").max = Math.max(0, n - 1);
  $("tick").value = 0;
  show(0);
}

await init();
$("run").addEventListener("click", run);
$("tick").addEventListener("input", (e) => show(Number(e.target.value)));
run();
