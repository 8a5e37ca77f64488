// Built by `wasm-bindgen --target web --out-dir crates/demo/www/pkg ...`, see README.
import init, { exampleData, exploreThresholds, calibrate, lossBreakdown } from "./pkg/selpred_demo.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);
const fmt = (v, digits = 4) => (v === null || v === undefined ? "" : v.toFixed(digits));

function show(target, fn) {
  try {
    fn();
  } catch (e) {
    $(target).innerHTML = `<p class="error">${e.message ?? e}</p>`;
  }
}

function table(headers, rows) {
  const head = headers.map((h) => `<th>${h}</th>`).join("");
  const body = rows.map((r) => `<tr>${r.map((c) => `<td>${c}</td>`).join("")}</tr>`).join("");
  return `<table><tr>${head}</tr>${body}</table>`;
}

function generate() {
  show("th-out", () => {
    const ex = JSON.parse(exampleData(num("ex-seed"), num("ex-n"), num("ex-k"), num("ex-signal")));
    $("logits").value = ex.logits_csv;
    $("labels").value = ex.labels_csv;
    explore();
  });
}

function runCalibration() {
  show("cal-out", () => {
    const v = JSON.parse(calibrate($("logits").value, $("labels").value));
    $("cal-out").innerHTML =
      table(
        ["", "T", "NLL", "ECE (15 bins)"],
        [
          ["before", "1.0000", fmt(v.nll_before), fmt(v.ece_before)],
          ["after", fmt(v.temperature) + (v.clamped ? " (at bound)" : ""), fmt(v.nll_after), fmt(v.ece_after)],
        ],
      ) + `<p><button id="cal-apply">use T in explorer</button></p>`;
    $("cal-apply").onclick = () => {
      $("th-t").value = v.temperature.toFixed(4);
      explore();
    };
  });
}

function explore() {
  $("th-cov-val").textContent = num("th-cov").toFixed(2);
  show("th-out", () => {
    const v = JSON.parse(
      exploreThresholds($("logits").value, $("labels").value, num("th-t"), num("th-cov"), num("th-step"), $("th-acc").checked),
    );
    const p = v.operating_point.point;
    $("th-plot").innerHTML = v.svg;
    $("th-out").innerHTML =
      `<p>operating point: &tau; = ${fmt(p.threshold, 2)}, coverage ${fmt(p.coverage)} (${p.n_retained} retained), ` +
      `accuracy ${fmt(p.sel_accuracy)}, macro-F1 ${fmt(p.sel_macro_f1)}, QWK ${fmt(p.sel_qwk)}</p>` +
      table(
        ["class", "samples", "retained", "acceptance rate", "retained recall"],
        v.classwise.classes.map((c) => [c.class, c.n_total, c.n_retained, fmt(c.acceptance_rate), fmt(c.retained_recall)]),
      );
  });
}

function losses() {
  $("ls-noise-val").textContent = num("ls-noise").toFixed(2);
  show("ls-out", () => {
    const v = JSON.parse(
      lossBreakdown(num("ls-seed"), num("ls-n"), num("ls-d"), num("ls-noise"), num("ls-intra"), num("ls-inv"), num("ls-corr")),
    );
    const s = v.sicova;
    $("ls-out").innerHTML = table(
      ["var z", "var z'", "cov z", "cov z'", "intra", "invariance", "correlation", "total", "triplet"],
      [[s.var_z, s.var_zp, s.cov_z, s.cov_zp, v.intra, s.inv, s.corr, s.total, v.triplet].map((x) => fmt(x))],
    );
  });
}

await init();
$("ex-generate").onclick = generate;
$("cal-run").onclick = runCalibration;
for (const id of ["th-t", "th-cov", "th-step", "th-acc"]) $(id).oninput = explore;
for (const id of ["ls-seed", "ls-n", "ls-d", "ls-noise", "ls-intra", "ls-inv", "ls-corr"]) $(id).oninput = losses;
generate();
losses();
