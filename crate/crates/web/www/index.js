import init, { priorMaps, attentionMasks, fidelitySweep } from "./pkg/fssk_web.js";

const $ = (id) => document.getElementById(id);

function request() {
  const side = Math.max(4, Math.min(48, Number($("side").value) | 0));
  return {
    seed: Number($("seed").value) | 0,
    height: side,
    width: side,
    cam_fidelity: Number($("fidelity").value),
    delta: Number($("delta").value),
    distractor: $("distractor").checked,
  };
}

function call(fn, req) {
  try {
    $("error").textContent = "";
    return JSON.parse(fn(JSON.stringify(req)));
  } catch (e) {
    $("error").textContent = String(e);
    return null;
  }
}

// Grey ramp for [lo, hi]; -Infinity and NaN draw red.
function drawGrid(values, w, h, scale, lo = 0, hi = 1, tint = null) {
  const c = document.createElement("canvas");
  c.width = w;
  c.height = h;
  c.style.width = `${w * scale}px`;
  c.style.height = `${h * scale}px`;
  const ctx = c.getContext("2d");
  const img = ctx.createImageData(w, h);
  for (let i = 0; i < w * h; i++) {
    const v = values[i];
    let rgb;
    if (!Number.isFinite(v)) rgb = [200, 30, 30];
    else {
      const t = Math.max(0, Math.min(1, (v - lo) / (hi - lo || 1)));
      rgb = tint ? tint.map((k) => 255 - (255 - k) * t) : [255 * t, 255 * t, 255 * t];
    }
    img.data.set([...rgb, 255], i * 4);
  }
  ctx.putImageData(img, 0, 0);
  return c;
}

function figure(canvas, caption) {
  const f = document.createElement("figure");
  const cap = document.createElement("figcaption");
  cap.textContent = caption;
  f.append(canvas, cap);
  return f;
}

function renderPriors() {
  const v = call(priorMaps, request());
  if (!v) return;
  const { width: w, height: h } = v;
  const s = Math.max(3, Math.floor(160 / w));
  // Dark blue: fg inside CAM+. Light blue: fg inside CAM-.
  const regions = v.support_mask.map((_, i) => (v.a1[i] ? 1 : v.a2[i] ? 0.5 : 0));
  const box = $("priors");
  box.replaceChildren(
    figure(drawGrid(v.support_mask, w, h, s), "support mask"),
    figure(drawGrid(v.support_cam, w, h, s, 0, 1, [200, 80, 0]), "support CAM"),
    figure(drawGrid(regions, w, h, s, 0, 1, [20, 60, 200]), "fg in CAM+ (dark) / CAM- (light)"),
    figure(drawGrid(v.query_cam, w, h, s, 0, 1, [200, 80, 0]), "query CAM"),
    figure(drawGrid(v.query_mask, w, h, s), "query mask"),
    figure(drawGrid(v.prior, w, h, s), "region prior"),
    figure(drawGrid(v.baseline, w, h, s), "baseline prior"),
  );
  $("prior-stats").textContent =
    `IoU at 0.5: region prior ${v.prior_iou.toFixed(3)}, baseline ${v.baseline_iou.toFixed(3)}`;
}

function renderAttention() {
  const req = { ...request(), height: 12, width: 12 };
  const v = call(attentionMasks, req);
  if (!v) return;
  const show = (masked) => v.scores.map((x, i) => (masked[i] ? -Infinity : x));
  let lo = Infinity, hi = -Infinity;
  for (const x of v.scores) { lo = Math.min(lo, x); hi = Math.max(hi, x); }
  const s = Math.max(2, Math.floor(320 / v.cols));
  $("attention").replaceChildren(
    figure(drawGrid(show(v.dicm.masked), v.cols, v.rows, s, lo, hi), "directional (one cell per column)"),
    figure(drawGrid(show(v.cyctr.masked), v.cols, v.rows, s, lo, hi), "cycle-consistent (whole columns)"),
  );
  const pct = (r) => (100 * r.ratio).toFixed(3);
  $("attn-stats").textContent =
    `directional: ${v.dicm.masked_cells} cells, ${pct(v.dicm)}%` +
    (v.dicm.fallback ? " (fallback)" : "") +
    ` | cycle: ${v.cyctr.masked_columns} columns, ${v.cyctr.masked_cells} cells, ${pct(v.cyctr)}%`;
}

function renderSweep() {
  const { seed, delta, distractor } = request();
  const pts = call(fidelitySweep, { seed, delta, distractor, episodes: 20, steps: 11 });
  if (!pts) return;
  const c = $("sweep-plot");
  const ctx = c.getContext("2d");
  const pad = 36, W = c.width - 2 * pad, H = c.height - 2 * pad;
  ctx.clearRect(0, 0, c.width, c.height);
  ctx.strokeStyle = "#999";
  ctx.strokeRect(pad, pad, W, H);
  ctx.fillStyle = "#333";
  ctx.font = "11px sans-serif";
  for (const t of [0, 0.5, 1]) {
    ctx.fillText(t.toFixed(1), pad - 24, pad + H - t * H + 4);
    ctx.fillText(t.toFixed(1), pad + t * W - 8, pad + H + 16);
  }
  ctx.fillText("CAM fidelity", pad + W / 2 - 30, c.height - 4);
  const line = (key, colour, y) => {
    ctx.strokeStyle = colour;
    ctx.beginPath();
    pts.forEach((p, i) => {
      const x = pad + p.cam_fidelity * W, yy = pad + H - p[key] * H;
      i ? ctx.lineTo(x, yy) : ctx.moveTo(x, yy);
    });
    ctx.stroke();
    ctx.fillStyle = colour;
    ctx.fillText(key.replace("_iou", ""), pad + W - 60, y);
  };
  line("prior_iou", "#1456c8", pad + 14);
  line("baseline_iou", "#c85014", pad + 28);
}

function refresh() {
  $("fidelity-v").textContent = $("fidelity").value;
  $("delta-v").textContent = $("delta").value;
  renderPriors();
  renderAttention();
}

await init();
for (const id of ["seed", "side", "fidelity", "delta", "distractor"]) {
  $(id).addEventListener("input", refresh);
}
$("sweep").addEventListener("click", renderSweep);
refresh();
renderSweep();
