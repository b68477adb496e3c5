# SPDX-License-Identifier: MIT OR Apache-2.0
"""Independent torch reference for relevance passes, edge matrices and pruned graphs.

Reads an ATGW weight file and case JSON files, re-implements the decoder
forward in float64 with the rule patches expressed as detach tricks, and lets
autograd do the backward. Writes one JSON fixture consumed by the Rust tests.

    python scripts/reference_lrp.py --model M.atgw --cases c1.json c2.json --out ref.json
"""

import argparse
import json
import struct
import zlib
from collections import deque

import torch

torch.set_default_dtype(torch.float64)

VARIANTS = ("attnlrp", "cplrp", "gradient")


def read_atgw(path):
    data = open(path, "rb").read()
    if data[:4] != b"ATGW":
        raise ValueError("bad magic")
    version, header_len = struct.unpack_from("<II", data, 4)
    if version != 1:
        raise ValueError(f"unsupported version {version}")
    header = json.loads(data[12 : 12 + header_len])
    payload = data[12 + header_len : -4]
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(payload) != crc:
        raise ValueError("checksum mismatch")
    tensors = {}
    for entry in header["tensors"]:
        count = 1
        for s in entry["shape"]:
            count *= s
        vals = struct.unpack_from(f"<{count}f", payload, entry["offset"])
        tensors[entry["name"]] = torch.tensor(vals).reshape(entry["shape"])
    cfg = header["config"]
    if "unembed" not in tensors:
        tensors["unembed"] = tensors["embed"].T.contiguous()
    return cfg, tensors


def half_product(a, b):
    """Value a*b; each factor receives half of the gradient."""
    return 0.5 * (a * b.detach()) + 0.5 * (a.detach() * b)


class Reference:
    def __init__(self, cfg, w, variant):
        self.cfg, self.w, self.variant = cfg, w, variant

    def rms(self, x, weight):
        inv = torch.rsqrt((x * x).mean(-1, keepdim=True) + self.cfg["norm_epsilon"])
        if self.variant != "gradient":
            inv = inv.detach()
        return x * inv * weight

    def mul(self, a, b):
        return a * b if self.variant == "gradient" else half_product(a, b)

    def rope(self, x):
        n, hd = x.shape[-2], x.shape[-1]
        half = hd // 2
        pos = torch.arange(n, dtype=torch.float64)[:, None]
        freq = self.cfg["rope_base"] ** (-2.0 * torch.arange(half, dtype=torch.float64) / hd)
        theta = pos * freq
        cos, sin = torch.cos(theta), torch.sin(theta)
        x1, x2 = x[..., :half], x[..., half:]
        return torch.cat([x1 * cos - x2 * sin, x2 * cos + x1 * sin], dim=-1)

    def bilinear(self, a, b):
        """Matmul with the variant's split between factors."""
        if self.variant == "gradient":
            return a @ b
        return 0.5 * (a @ b.detach()) + 0.5 * (a.detach() @ b)

    def block(self, l, x):
        cfg, w = self.cfg, self.w
        p = f"layer.{l}."
        n, d = x.shape
        heads = cfg["num_heads"]
        hd = d // heads
        h = self.rms(x, w[p + "norm1"])
        split = lambda t: t.reshape(n, heads, hd).transpose(0, 1)
        q = self.rope(split(h @ w[p + "attn.wq"]))
        k = self.rope(split(h @ w[p + "attn.wk"]))
        v = split(h @ w[p + "attn.wv"])
        scores = self.bilinear(q, k.transpose(-1, -2)) / hd**0.5
        mask = torch.triu(torch.ones(n, n, dtype=torch.bool), diagonal=1)
        probs = torch.softmax(scores.masked_fill(mask, float("-inf")), dim=-1)
        if self.variant == "cplrp":
            mixed = probs.detach() @ v
        else:
            mixed = self.bilinear(probs, v)
        x = x + mixed.transpose(0, 1).reshape(n, d) @ w[p + "attn.wo"]
        h = self.rms(x, w[p + "norm2"])
        gated = self.mul(torch.nn.functional.silu(h @ w[p + "mlp.gate"]), h @ w[p + "mlp.up"])
        x = x + gated @ w[p + "mlp.down"]
        if l + 1 == cfg["num_layers"]:
            x = self.rms(x, w["final_norm"])
        return x

    def span(self, x, start, stop):
        """States after blocks start+1..=stop."""
        out = []
        for l in range(start + 1, stop + 1):
            x = self.block(l, x)
            out.append(x)
        return out


def node_pass(cfg, w, case, variant):
    ref = Reference(cfg, w, variant)
    emb = w["embed"][torch.tensor(case["tokens"])].clone().requires_grad_(True)
    states = [emb] + ref.span(emb, -1, cfg["num_layers"] - 1)
    for s in states[1:]:
        s.retain_grad()
    direction = w["unembed"][:, case["target"]] - w["unembed"][:, case["contrast"]]
    delta = states[-1][case["position"]] @ direction
    delta.backward()
    grads = [s.grad.detach() for s in states]
    hs = [s.detach() for s in states]
    relevance = [(h * g).sum(-1) for h, g in zip(hs, grads)]
    return ref, hs, grads, relevance, delta.item()


def edge_matrix(ref, hs, grads, s, t):
    n = hs[0].shape[0]
    rows = []
    for j in range(n):
        x = hs[s + 1].clone().requires_grad_(True)
        out = ref.span(x, s, t)[-1]
        (out[j] @ grads[t + 1][j]).backward()
        rows.append((x.detach() * x.grad).sum(-1))
    return torch.stack(rows)


def cumulative_keep(values, p):
    flat = values.flatten().tolist()
    mags = sorted((abs(v) for v in flat if v != 0.0), reverse=True)
    if not mags:
        return set()
    goal = p * sum(mags)
    acc, k_star = 0.0, len(mags)
    for k, a in enumerate(mags):
        acc += a
        if acc >= goal:
            k_star = k + 1
            break
    tau = mags[k_star - 1]
    return {i for i, v in enumerate(flat) if v != 0.0 and abs(v) >= tau}


def pruned_graph(case, variant, relevance, matrices, p, node_threshold, num_layers):
    n = len(case["tokens"])
    layers = sorted({l for pair in matrices for l in pair})
    nodes = [
        (l, i, relevance[l + 1][i].item())
        for l in layers
        for i in range(n)
        if abs(relevance[l + 1][i].item()) > node_threshold
    ]
    kept = {(l, i) for l, i, _ in nodes}
    edges = []
    for (s, t), m in matrices.items():
        for idx in sorted(cumulative_keep(m, p)):
            j, i = divmod(idx, n)
            if (s, i) in kept and (t, j) in kept:
                edges.append((s, i, t, j, m[j, i].item()))
    target = (num_layers - 1, case["position"])
    incoming = {}
    for e in edges:
        incoming.setdefault((e[2], e[3]), []).append((e[0], e[1]))
    seen, queue = {target}, deque([target])
    while queue:
        for src in incoming.get(queue.popleft(), []):
            if src not in seen:
                seen.add(src)
                queue.append(src)
    reinstated = target not in kept
    out_nodes = [nd for nd in nodes if (nd[0], nd[1]) in seen]
    if reinstated:
        out_nodes.append((target[0], target[1], relevance[target[0] + 1][target[1]].item()))
        out_nodes.sort(key=lambda nd: (nd[0], nd[1]))
    out_edges = [e for e in edges if (e[2], e[3]) in seen]
    return {
        "schema_version": 1,
        "case_id": case["case_id"],
        "rule_variant": variant,
        "prune": {"mode": "cumulative", "p": p, "node_threshold": node_threshold},
        "layer_pairs": [list(k) for k in matrices],
        "target": {"layer": target[0], "pos": target[1], "relevance": relevance[target[0] + 1][target[1]].item()},
        "nodes": [{"layer": l, "pos": i, "relevance": r} for l, i, r in out_nodes],
        "edges": [{"s": s, "i": i, "t": t, "j": j, "w": wv} for s, i, t, j, wv in out_edges],
        "flags": {"empty": not out_edges, "target_reinstated": reinstated},
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--model", required=True)
    ap.add_argument("--cases", nargs="+", required=True)
    ap.add_argument("--out", required=True)
    ap.add_argument("--p", type=float, default=0.85)
    ap.add_argument("--node-threshold", type=float, default=0.01)
    args = ap.parse_args()

    cfg, w = read_atgw(args.model)
    L = cfg["num_layers"]
    pairs = [(l - 1, l) for l in range(L)]
    fixture = {"p": args.p, "node_threshold": args.node_threshold, "cases": []}
    for path in args.cases:
        case = json.load(open(path))
        entry = {"case_id": case["case_id"], "variants": {}}
        for variant in VARIANTS:
            ref, hs, grads, relevance, delta = node_pass(cfg, w, case, variant)
            matrices = {(s, t): edge_matrix(ref, hs, grads, s, t) for s, t in pairs}
            entry["variants"][variant] = {
                "delta_logit": delta,
                "node_relevance": [r.tolist() for r in relevance],
                "edges": {f"{s}:{t}": m.tolist() for (s, t), m in matrices.items()},
                "graph": pruned_graph(case, variant, relevance, matrices, args.p, args.node_threshold, L),
            }
        fixture["cases"].append(entry)
    with open(args.out, "w") as f:
        json.dump(fixture, f, indent=1)
        f.write("\n")


if __name__ == "__main__":
    main()
