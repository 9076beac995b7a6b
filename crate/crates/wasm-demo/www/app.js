import init, { Demo } from "./pkg/dgr_wasm.js";

const SIZE = 128;
const $ = (id) => document.getElementById(id);
const status = (msg) => { $("status").textContent = msg; };

function draw(canvas, values, width, height) {
  canvas.width = width;
  canvas.height = height;
  let lo = Infinity, hi = -Infinity;
  for (const v of values) { if (v < lo) lo = v; if (v > hi) hi = v; }
  const scale = hi > lo ? 255 / (hi - lo) : 0;
  const ctx = canvas.getContext("2d");
  const img = ctx.createImageData(width, height);
  for (let i = 0; i < values.length; i++) {
    const g = (values[i] - lo) * scale;
    img.data.set([g, g, g, 255], 4 * i);
  }
  ctx.putImageData(img, 0, 0);
}

const fmt = (q) => `PSNR ${q.psnr.toFixed(2)} dB, SSIM ${q.ssim.toFixed(3)}`;

await init();
const demo = new Demo(SIZE);
draw($("phantom"), demo.phantom(), SIZE, SIZE);

let running = false;

function showSinogram() {
  draw($("sinogram"), demo.sinogram(), demo.sinogram_detectors(), demo.sinogram_views());
  $("sino-caption").textContent = `sinogram, ${demo.sinogram_views()} views`;
}

function guarded(f) {
  return () => {
    try { f(); } catch (e) { status(`error: ${e.message ?? e}`); running = false; }
  };
}

$("simulate").onclick = guarded(() => {
  running = false;
  demo.simulate(+$("views").value, +$("extent").value, +$("noise").value, BigInt(Date.now() % 1e6));
  showSinogram();
  $("fbp-caption").textContent = "FBP";
  $("dgr-caption").textContent = "Gaussians";
  $("step").disabled = $("run").disabled = true;
  status("scan ready");
});

$("fbp").onclick = guarded(() => {
  draw($("fbp-view"), demo.fbp(), SIZE, SIZE);
  $("fbp-caption").textContent = `FBP: ${fmt(demo.fbp_quality())}`;
  status("FBP done");
});

function showStep(image) {
  draw($("dgr-view"), image, SIZE, SIZE);
  $("dgr-caption").textContent = `iteration ${demo.iteration()}: ${fmt(demo.quality_of(image))}`;
  status(`${demo.n_gaussians()} Gaussians`);
}

$("start").onclick = guarded(() => {
  running = false;
  demo.start(+$("gaussians").value, +$("iters").value);
  showStep(demo.step(0));
  $("step").disabled = $("run").disabled = false;
});

$("step").onclick = guarded(() => showStep(demo.step(10)));

$("run").onclick = guarded(() => {
  running = !running;
  $("run").textContent = running ? "Pause" : "Run";
  const tick = guarded(() => {
    if (!running) return;
    const before = demo.iteration();
    showStep(demo.step(2));
    if (demo.iteration() === before) {
      running = false;
      $("run").textContent = "Run";
      status("iteration budget reached");
      return;
    }
    requestAnimationFrame(tick);
  });
  requestAnimationFrame(tick);
});

showSinogram();
status("ready");
