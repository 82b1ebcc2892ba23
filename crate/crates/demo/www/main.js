import init, { augmentPreview, metricReport, cdDiagram } from "./pkg/tlbench_demo.js";

const $ = (id) => document.getElementById(id);

function guarded(errId, fn) {
  return async () => {
    $(errId).textContent = "";
    try {
      await fn();
    } catch (e) {
      $(errId).textContent = String(e.message ?? e);
    }
  };
}

async function sourcePixels() {
  const file = $("aug-file").files[0];
  const canvas = document.createElement("canvas");
  const ctx = canvas.getContext("2d");
  if (!file) {
    // no upload: a disc on a gradient
    canvas.width = canvas.height = 96;
    const g = ctx.createLinearGradient(0, 0, 96, 96);
    g.addColorStop(0, "#203040");
    g.addColorStop(1, "#8090a0");
    ctx.fillStyle = g;
    ctx.fillRect(0, 0, 96, 96);
    ctx.fillStyle = "#e0c040";
    ctx.beginPath();
    ctx.arc(40, 44, 22, 0, 2 * Math.PI);
    ctx.fill();
  } else {
    const bmp = await createImageBitmap(file);
    const scale = Math.min(1, 256 / Math.max(bmp.width, bmp.height));
    canvas.width = Math.max(2, Math.round(bmp.width * scale));
    canvas.height = Math.max(2, Math.round(bmp.height * scale));
    ctx.drawImage(bmp, 0, 0, canvas.width, canvas.height);
  }
  return ctx.getImageData(0, 0, canvas.width, canvas.height);
}

async function runAugment() {
  const src = await sourcePixels();
  const preview = augmentPreview(
    new Uint8Array(src.data.buffer),
    src.width,
    src.height,
    BigInt($("aug-seed").value || 0),
    Number($("aug-count").value),
    Number($("aug-p").value),
  );
  const out = $("replicas");
  out.replaceChildren();
  const tiles = [["source", src]];
  for (let i = 0; i < preview.len(); i++) {
    const data = new ImageData(new Uint8ClampedArray(preview.rgba(i)), preview.width(i), preview.height(i));
    tiles.push([preview.ops(i) || "(no ops drawn)", data]);
  }
  preview.free();
  for (const [caption, data] of tiles) {
    const fig = document.createElement("figure");
    const c = document.createElement("canvas");
    c.width = data.width;
    c.height = data.height;
    c.getContext("2d").putImageData(data, 0, 0);
    const cap = document.createElement("figcaption");
    cap.textContent = caption;
    fig.append(c, cap);
    out.append(fig);
  }
}

const METRICS = ["accuracy", "sensitivity", "specificity", "precision", "npv", "f1", "mcc", "kappa", "lr_pos", "lr_neg", "auc"];

function runMetrics() {
  const { report, svg } = JSON.parse(metricReport($("m-text").value, Number($("m-threshold").value)));
  const c = report.confusion;
  const rows = [["TP / FN", `${c.tp} / ${c.fn}`], ["FP / TN", `${c.fp} / ${c.tn}`]];
  for (const m of METRICS) {
    const v = report[m];
    rows.push([m, v === null || v === undefined ? "undefined" : v.toFixed(4)]);
  }
  $("m-table").innerHTML = rows.map(([k, v]) => `<tr><th>${k}</th><td>${v}</td></tr>`).join("");
  $("m-roc").innerHTML = svg;
}

function runCd() {
  const { comparison, svg } = JSON.parse(cdDiagram($("cd-text").value, Number($("cd-alpha").value)));
  const f = comparison.friedman;
  $("cd-stats").textContent =
    `Friedman chi2 = ${f.statistic.toFixed(3)}, df = ${f.df}, p = ${f.p_value.toPrecision(3)} (${f.method}); ` +
    `CD = ${comparison.cd.critical_difference.toFixed(3)}`;
  $("cd-svg").innerHTML = svg;
}

await init();
$("aug-run").onclick = guarded("aug-err", runAugment);
$("m-run").onclick = guarded("m-err", runMetrics);
$("cd-run").onclick = guarded("cd-err", runCd);
guarded("aug-err", runAugment)();
guarded("m-err", runMetrics)();
guarded("cd-err", runCd)();
