import init, { synth_sample, lr_schedule, Trainer } from "./pkg/isunet_web.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

// Paint a size×size map of values in [0, 1] as grey levels.
function paint(canvas, values, size) {
  const off = new OffscreenCanvas(size, size);
  const ctx = off.getContext("2d");
  const img = ctx.createImageData(size, size);
  for (let i = 0; i < values.length; i++) {
    const v = Math.round(255 * Math.min(1, Math.max(0, values[i])));
    img.data.set([v, v, v, 255], 4 * i);
  }
  ctx.putImageData(img, 0, 0);
  const out = canvas.getContext("2d");
  out.imageSmoothingEnabled = false;
  out.drawImage(off, 0, 0, canvas.width, canvas.height);
}

function plot(canvas, ys, { log = false } = {}) {
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  if (ys.length === 0) return;
  const f = log ? (v) => Math.log10(Math.max(v, 1e-6)) : (v) => v;
  const vals = ys.map(f);
  const lo = log ? Math.min(...vals) : 0;
  const hi = Math.max(...vals);
  const pad = 10;
  const x = (i) => pad + (i / Math.max(1, ys.length - 1)) * (canvas.width - 2 * pad);
  const y = (v) => canvas.height - pad - ((v - lo) / (hi - lo || 1)) * (canvas.height - 2 * pad);
  ctx.strokeStyle = "#1f5fa8";
  ctx.beginPath();
  vals.forEach((v, i) => (i ? ctx.lineTo(x(i), y(v)) : ctx.moveTo(x(i), y(v))));
  ctx.stroke();
}

function drawSample() {
  try {
    const s = synth_sample(BigInt(num("s-seed")), num("s-index"), num("s-size"),
      num("s-noise"), num("s-large"));
    paint($("s-image"), s.image(), s.size());
    paint($("s-mask"), s.mask(), s.size());
    $("s-info").textContent =
      `object areas (px): ${Array.from(s.areas()).join(", ")}; small objects: ${s.small_objects()}`;
    s.free();
  } catch (e) {
    $("s-info").textContent = String(e);
  }
}

function drawSchedule() {
  const lr = lr_schedule(num("l-lr0"), num("l-factor"), num("l-every"),
    $("l-single").checked, num("l-epochs"));
  plot($("l-plot"), Array.from(lr));
  $("l-info").textContent = `first ${lr[0].toExponential(3)}, last ${lr[lr.length - 1].toExponential(3)}`;
}

let trainer = null;
let losses = [];
let running = false;

function resetTrainer() {
  running = false;
  $("t-run").textContent = "Run";
  if (trainer) trainer.free();
  try {
    trainer = new Trainer($("t-variant").value, BigInt(num("t-seed")), num("t-samples"), num("t-lr"));
  } catch (e) {
    trainer = null;
    $("t-info").textContent = String(e);
    return;
  }
  losses = [];
  $("t-which").max = trainer.samples() - 1;
  showTrainer();
}

function showTrainer() {
  if (!trainer) return;
  const i = Math.min(num("t-which"), trainer.samples() - 1);
  const n = trainer.size();
  paint($("t-image"), trainer.image(i), n);
  paint($("t-mask"), trainer.mask(i), n);
  paint($("t-pred"), trainer.prediction(i), n);
  plot($("t-loss"), losses, { log: true });
  const [dice, small] = trainer.dice(i);
  const t = trainer.terms();
  const terms = t.length
    ? `loss ${t[0].toFixed(4)} (image ${t[1].toFixed(4)}, mask ${t[2].toFixed(4)}, ` +
      `intermediate ${t[3].toFixed(4)}, reconstruction ${t[4].toFixed(4)})`
    : "not trained yet";
  $("t-info").textContent =
    `${trainer.parameters()} parameters, step ${trainer.steps()}: ${terms}; ` +
    `Dice ${dice.toFixed(3)}, small-object Dice ${Number.isNaN(small) ? "n/a" : small.toFixed(3)}`;
}

function loop() {
  if (!running || !trainer) return;
  losses.push(trainer.train(1));
  showTrainer();
  requestAnimationFrame(loop);
}

await init();
$("status").textContent = "";
$("s-go").onclick = drawSample;
for (const id of ["l-lr0", "l-factor", "l-every", "l-epochs", "l-single"]) $(id).oninput = drawSchedule;
$("t-reset").onclick = resetTrainer;
$("t-which").oninput = showTrainer;
$("t-run").onclick = () => {
  running = !running;
  $("t-run").textContent = running ? "Pause" : "Run";
  loop();
};
drawSample();
drawSchedule();
resetTrainer();
