import init, { inspectArchitecture, shuffleMap, mutateText } from "./pkg/brca_web.js";

const $ = (id) => document.getElementById(id);

function call(fn, ...args) {
  try {
    return { value: JSON.parse(fn(...args)) };
  } catch (e) {
    return { error: String(e) };
  }
}

function showError(el, message) {
  el.innerHTML = "";
  const p = document.createElement("p");
  p.className = "error";
  p.textContent = message;
  el.appendChild(p);
}

function row(cells, tag = "td") {
  const tr = document.createElement("tr");
  for (const c of cells) {
    const td = document.createElement(tag);
    td.textContent = c;
    tr.appendChild(td);
  }
  return tr;
}

function renderArchitecture() {
  const n = Number($("arch-n").value);
  const len = Number($("arch-len").value);
  const table = $("arch-stages");
  table.innerHTML = "";
  const r = call(inspectArchitecture, n, len);
  if (r.error) {
    showError($("arch-summary"), r.error);
    return;
  }
  const a = r.value;
  $("arch-summary").textContent =
    `padded to ${a.padded_len} bytes, ${a.recursions} recursion steps per side, ` +
    `${a.param_layers} parameterized layers`;
  table.appendChild(row(["stage", "shape"], "th"));
  for (const s of a.stages) table.appendChild(row([s.name, `[${s.shape.join(", ")}]`]));
}

function renderShuffle() {
  const grid = $("shuf-grid");
  grid.innerHTML = "";
  const r = call(shuffleMap, Number($("shuf-f").value), Number($("shuf-l").value), $("shuf-order").value);
  if (r.error) {
    const tr = document.createElement("tr");
    const td = document.createElement("td");
    td.className = "error";
    td.textContent = r.error;
    tr.appendChild(td);
    grid.appendChild(tr);
    return;
  }
  const m = r.value;
  grid.appendChild(row(["out", ...m.source[0].map((_, t) => `t${t}`)], "th"));
  m.source.forEach((cells, f) => {
    grid.appendChild(row([`f${f}`, ...cells.map(([sf, st]) => `${sf}:${st}`)]));
  });
}

function printable(byte) {
  if (byte >= 32 && byte < 127) return String.fromCharCode(byte);
  return `\\x${byte.toString(16).padStart(2, "0")}`;
}

function renderMutation() {
  const p = Number($("mut-p").value);
  $("mut-p-val").textContent = p.toFixed(1);
  const out = $("mut-out");
  const r = call(mutateText, $("mut-text").value, p, Number($("mut-seed").value) >>> 0);
  if (r.error) {
    showError(out, r.error);
    return;
  }
  const m = r.value;
  const changed = new Set(m.changed);
  out.innerHTML = "";
  const summary = document.createElement("p");
  summary.textContent =
    `${m.changed.length} of ${m.original.length} bytes replaced; ` +
    `padded length ${m.padded_len}, null terminator at ${m.eos_position}`;
  const line = document.createElement("p");
  line.className = "bytes";
  m.mutated.forEach((b, i) => {
    const span = document.createElement("span");
    span.textContent = printable(b);
    if (changed.has(i)) span.className = "changed";
    line.appendChild(span);
  });
  const eos = document.createElement("span");
  eos.className = "eos";
  eos.textContent = "\\0";
  line.appendChild(eos);
  out.append(summary, line);
}

await init();
$("status").textContent = "";
for (const id of ["arch-n", "arch-len"]) $(id).addEventListener("input", renderArchitecture);
for (const id of ["shuf-f", "shuf-l", "shuf-order"]) $(id).addEventListener("input", renderShuffle);
for (const id of ["mut-text", "mut-p", "mut-seed"]) $(id).addEventListener("input", renderMutation);
renderArchitecture();
renderShuffle();
renderMutation();
