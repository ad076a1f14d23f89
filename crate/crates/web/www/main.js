import init, { compare_traces, tsx_write_set, split_fib } from "./pkg/heisenlab_web.js";

const $ = (id) => document.getElementById(id);

function verdict(el, ok, text) {
  el.className = ok ? "ok" : "bad";
  el.textContent = text;
}

function showTraces() {
  const r = JSON.parse(compare_traces($("defense").value, $("strategy").value));
  if (r.error) return verdict($("traces-verdict"), false, r.error);
  const [a, b] = r.runs;
  $("trace-a").textContent = `secret ${a.secret}, ${a.exits} exits\n` + a.trace.join("\n");
  $("trace-b").textContent = `secret ${b.secret}, ${b.exits} exits\n` + b.trace.join("\n");
  const text = r.equal
    ? `traces equal (${r.protection} protection)`
    : `traces differ at observation ${r.divergence} (${r.protection} protection)`;
  verdict($("traces-verdict"), r.equal, text);
}

function showTsx() {
  const r = JSON.parse(tsx_write_set(Number($("lines").value)));
  if (r.error) return verdict($("tsx-out"), false, r.error);
  verdict($("tsx-out"), r.committed,
    `${r.lines} lines against a capacity of ${r.capacity}: ${r.committed ? "committed" : `aborted ${r.aborts} time(s)`}`);
}

function showSplit() {
  const r = JSON.parse(split_fib(Number($("fib-n").value), Number($("init").value)));
  if (r.error) return verdict($("split-out"), false, r.error);
  verdict($("split-out"), r.end === "terminated",
    `output ${r.output}, ${r.intermediate_commits} intermediate commits over ${r.instructions} instructions (${r.end})`);
}

await init();
$("run-traces").onclick = showTraces;
$("run-tsx").onclick = showTsx;
$("run-split").onclick = showSplit;
showTraces();
