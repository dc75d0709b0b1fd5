// Built with: wasm-pack build --target web --out-dir www/pkg
import init, { sceneSize, renderProposals, gumbelHistogram, trainSynthetic } from "./pkg/regionedit_wasm_demo.js";

const $ = (id) => document.getElementById(id);

function draw() {
  const n = sceneSize();
  const canvas = $("scene");
  canvas.width = n;
  canvas.height = n;
  canvas.style.width = `${2 * n}px`;
  try {
    const rgba = renderProposals(Number($("anchors").value), Number($("focus").value));
    canvas.getContext("2d").putImageData(new ImageData(new Uint8ClampedArray(rgba), n, n), 0, 0);
  } catch (e) {
    alert(e);
  }
}

function sample() {
  const h = JSON.parse(gumbelHistogram($("logits").value, Number($("draws").value), 1));
  const el = $("hist");
  el.innerHTML = "";
  h.frequencies.forEach((f, i) => {
    const col = document.createElement("div");
    col.style.display = "inline-block";
    col.title = `freq ${f.toFixed(4)} / softmax ${h.softmax[i].toFixed(4)}`;
    col.innerHTML = `<div class="ref" style="margin-bottom:${140 * h.softmax[i]}px"></div>`
      + `<div class="bar" style="height:${140 * f}px"></div>`;
    el.appendChild(col);
  });
}

function train() {
  $("trace").textContent = "training...";
  setTimeout(() => {
    const t = JSON.parse(trainSynthetic(Number($("epochs").value), Number($("seed").value)));
    const rows = t.probabilities.map((p, e) =>
      `${e === 0 ? "init " : `ep ${e} `}` + p.map((v) => v.toFixed(3)).join(" "));
    $("trace").textContent =
      `best size by enumeration: ${t.best_size}\n`
      + `losses: ${t.enumerated_losses.map((v) => v.toFixed(3)).join(" ")}\n\n`
      + rows.join("\n");
  }, 10);
}

await init();
$("draw").onclick = draw;
$("sample").onclick = sample;
$("train").onclick = train;
draw();
