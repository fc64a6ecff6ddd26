import init, { render_sample, KernelExplorer, MiniTrainer } from "./pkg/ddpe_wasm.js";

const DOMAIN_NAMES = ["identity", "inverted", "gradient", "stroke"];
const DOMAIN_COLORS = ["#2458d6", "#d62446", "#1f9d55", "#b7791f"];

function el(id) { return document.getElementById(id); }

function canvasCell(label, w, h, scale) {
  const wrap = document.createElement("div");
  wrap.className = "cell";
  const canvas = document.createElement("canvas");
  canvas.width = w;
  canvas.height = h;
  canvas.style.width = `${w * scale}px`;
  canvas.style.height = `${h * scale}px`;
  wrap.appendChild(canvas);
  wrap.appendChild(document.createTextNode(label));
  return { wrap, canvas };
}

function drawRgba(canvas, pixels, size) {
  const ctx = canvas.getContext("2d");
  ctx.putImageData(new ImageData(new Uint8ClampedArray(pixels), size, size), 0, 0);
}

// diverging blue-white-red map for signed kernel weights
function drawHeat(canvas, values, w, h) {
  let peak = 1e-12;
  for (const v of values) peak = Math.max(peak, Math.abs(v));
  const img = new Uint8ClampedArray(w * h * 4);
  values.forEach((v, i) => {
    const t = Math.max(-1, Math.min(1, v / peak));
    const r = t > 0 ? 255 : Math.round(255 * (1 + t));
    const b = t < 0 ? 255 : Math.round(255 * (1 - t));
    const g = Math.round(255 * (1 - Math.abs(t)));
    img.set([r, g, b, 255], i * 4);
  });
  canvas.getContext("2d").putImageData(new ImageData(img, w, h), 0, 0);
}

function drawGray(canvas, values, w, h) {
  let lo = Infinity, hi = -Infinity;
  for (const v of values) { lo = Math.min(lo, v); hi = Math.max(hi, v); }
  const span = hi - lo || 1;
  const img = new Uint8ClampedArray(w * h * 4);
  values.forEach((v, i) => {
    const g = Math.round(255 * (v - lo) / span);
    img.set([g, g, g, 255], i * 4);
  });
  canvas.getContext("2d").putImageData(new ImageData(img, w, h), 0, 0);
}

// ── section 1: dataset explorer ─────────────────────────────────────────

function refreshDataset() {
  const grid = el("ds-grid");
  grid.textContent = "";
  const cls = Number(el("ds-class").value);
  const seed = BigInt(el("ds-seed").value || 0);
  for (let domain = 0; domain < 4; domain++) {
    const { wrap, canvas } = canvasCell(DOMAIN_NAMES[domain], 16, 16, 6);
    drawRgba(canvas, render_sample(cls, domain, seed, 16), 16);
    grid.appendChild(wrap);
  }
}

// ── section 2: kernel assembly explorer ─────────────────────────────────

let explorer = null;

function refreshKernel() {
  const seed = BigInt(el("ka-seed").value || 0);
  if (!explorer || explorer._seed !== seed) {
    explorer = new KernelExplorer(seed, 5);
    explorer._seed = seed;
  }
  const payload = JSON.parse(explorer.assemble(
    Number(el("l0").value), Number(el("l1").value),
    Number(el("l2").value), Number(el("l3").value)));

  const grid = el("ka-grid");
  grid.textContent = "";
  const k = payload.k;
  const names = ["dense", "point", "column", "row"];
  payload.templates.forEach((t, i) => {
    const { wrap, canvas } = canvasCell(
      `${names[i]} · λ=${payload.lambda[i].toFixed(2)}`, k, k, 12);
    drawHeat(canvas, t, k, k);
    grid.appendChild(wrap);
  });
  const stat = canvasCell("static", k, k, 12);
  drawHeat(stat.canvas, payload.static, k, k);
  grid.appendChild(stat.wrap);
  const asm = canvasCell("assembled", k, k, 12);
  drawHeat(asm.canvas, payload.assembled, k, k);
  grid.appendChild(asm.wrap);
  const probe = canvasCell("probe", payload.sample_size, payload.sample_size, 4);
  drawGray(probe.canvas, payload.sample, payload.sample_size, payload.sample_size);
  grid.appendChild(probe.wrap);
  const resp = canvasCell("response", payload.sample_size, payload.sample_size, 4);
  drawGray(resp.canvas, payload.response, payload.sample_size, payload.sample_size);
  grid.appendChild(resp.wrap);
}

// ── section 3: in-browser training ──────────────────────────────────────

let trainer = null;
let lossHistory = [];

function resetTrainer() {
  trainer = new MiniTrainer(el("tr-mode").value, BigInt(el("tr-seed").value || 0));
  lossHistory = [];
  el("tr-epochs").textContent = "0";
  el("tr-acc").textContent = "–";
  drawLoss();
  drawEmbedding();
}

function drawLoss() {
  const canvas = el("tr-loss");
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  ctx.strokeStyle = "#dde3ec";
  ctx.strokeRect(0.5, 0.5, canvas.width - 1, canvas.height - 1);
  if (lossHistory.length < 2) return;
  const max = Math.max(...lossHistory.map(p => Math.max(p.ce_clean, p.ce_perturbed ?? 0)));
  const x = i => 8 + (canvas.width - 16) * i / (lossHistory.length - 1);
  const y = v => canvas.height - 8 - (canvas.height - 16) * v / max;
  const trace = (key, color) => {
    ctx.strokeStyle = color;
    ctx.lineWidth = 1.5;
    ctx.beginPath();
    let started = false;
    lossHistory.forEach((p, i) => {
      const v = p[key];
      if (v == null) return;
      if (!started) { ctx.moveTo(x(i), y(v)); started = true; }
      else ctx.lineTo(x(i), y(v));
    });
    ctx.stroke();
  };
  trace("ce_clean", "#2458d6");
  trace("ce_perturbed", "#d62446");
}

function drawEmbedding() {
  const canvas = el("tr-embed");
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  ctx.strokeStyle = "#dde3ec";
  ctx.strokeRect(0.5, 0.5, canvas.width - 1, canvas.height - 1);
  if (!trainer) return;
  const points = JSON.parse(trainer.coefficient_embedding());
  let xs = points.map(p => p.x), ys = points.map(p => p.y);
  const lo = a => Math.min(...a), hi = a => Math.max(...a);
  const sx = (hi(xs) - lo(xs)) || 1, sy = (hi(ys) - lo(ys)) || 1;
  for (const p of points) {
    const px = 10 + (canvas.width - 20) * (p.x - lo(xs)) / sx;
    const py = 10 + (canvas.height - 20) * (p.y - lo(ys)) / sy;
    ctx.fillStyle = DOMAIN_COLORS[p.domain];
    ctx.beginPath();
    ctx.arc(px, py, 2.5, 0, Math.PI * 2);
    ctx.fill();
  }
  el("tr-legend").innerHTML = DOMAIN_NAMES
    .map((n, i) => `<span><i style="background:${DOMAIN_COLORS[i]}"></i>${n}${i === 3 ? " (unseen)" : ""}</span>`)
    .join("");
}

async function stepTraining() {
  const btn = el("tr-step");
  btn.disabled = true;
  // let the browser paint the disabled state before the compute burst
  await new Promise(r => setTimeout(r, 20));
  const appended = JSON.parse(trainer.step_epochs(5));
  lossHistory.push(...appended);
  el("tr-epochs").textContent = String(trainer.epochs_done());
  el("tr-acc").textContent = trainer.target_accuracy().toFixed(3);
  drawLoss();
  drawEmbedding();
  btn.disabled = false;
}

// ── wiring ──────────────────────────────────────────────────────────────

init().then(() => {
  el("ds-class").addEventListener("change", refreshDataset);
  el("ds-seed").addEventListener("change", refreshDataset);
  refreshDataset();

  for (const id of ["ka-seed", "l0", "l1", "l2", "l3"]) {
    el(id).addEventListener("input", refreshKernel);
  }
  refreshKernel();

  el("tr-step").addEventListener("click", stepTraining);
  el("tr-reset").addEventListener("click", resetTrainer);
  el("tr-mode").addEventListener("change", resetTrainer);
  el("tr-seed").addEventListener("change", resetTrainer);
  resetTrainer();
});
