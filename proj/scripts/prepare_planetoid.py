#!/usr/bin/env python3
"""Convert public Cora/Citeseer/Pubmed distributions into TSV bundles.

Two common source layouts are supported and auto-detected:

  LINQS:      <name>.content + <name>.cites   (plain text)
  Planetoid:  ind.<name>.{x,y,tx,ty,allx,ally,graph,test.index}   (pickles;
              needs numpy + scipy)

Output: <out>/<name>/{edges.tsv,features.tsv,labels.tsv} in the format the
`cgt` CLI ingests (whitespace-separated, 0-based contiguous node ids).

Examples:
  python3 scripts/prepare_planetoid.py --name cora --src /path/to/cora --out data
  python3 scripts/prepare_planetoid.py --name citeseer --src /path/to/citeseer --out data
"""

import argparse
import os
import pickle
import sys


def write_bundle(out_dir, name, n, edges, features, labels):
    dest = os.path.join(out_dir, name)
    os.makedirs(dest, exist_ok=True)
    uniq = sorted({(min(u, v), max(u, v)) for u, v in edges if u != v})
    with open(os.path.join(dest, "edges.tsv"), "w") as f:
        for u, v in uniq:
            f.write(f"{u}\t{v}\n")
    with open(os.path.join(dest, "features.tsv"), "w") as f:
        for row in features:
            f.write(" ".join(repr(float(x)) for x in row))
            f.write("\n")
    with open(os.path.join(dest, "labels.tsv"), "w") as f:
        for y in labels:
            f.write(f"{int(y)}\n")
    print(f"wrote {dest}: {n} nodes, {len(uniq)} edges, "
          f"{len(features[0])} features, {len(set(labels))} classes")


def convert_linqs(name, src, out_dir):
    content = os.path.join(src, f"{name}.content")
    cites = os.path.join(src, f"{name}.cites")
    ids, features, label_names = [], [], []
    with open(content) as f:
        for line in f:
            parts = line.strip().split()
            if not parts:
                continue
            ids.append(parts[0])
            features.append([float(x) for x in parts[1:-1]])
            label_names.append(parts[-1])
    index = {node: i for i, node in enumerate(ids)}
    classes = {c: i for i, c in enumerate(sorted(set(label_names)))}
    labels = [classes[c] for c in label_names]

    edges, dangling = [], 0
    with open(cites) as f:
        for line in f:
            parts = line.strip().split()
            if len(parts) != 2:
                continue
            a, b = parts
            if a in index and b in index:
                edges.append((index[a], index[b]))
            else:
                dangling += 1
    if dangling:
        print(f"note: skipped {dangling} citation lines referencing unknown ids")
    write_bundle(out_dir, name, len(ids), edges, features, labels)


def _load_pickle(path):
    with open(path, "rb") as f:
        return pickle.load(f, encoding="latin1")


def convert_planetoid(name, src, out_dir):
    import numpy as np
    from scipy import sparse

    objs = {k: _load_pickle(os.path.join(src, f"ind.{name}.{k}"))
            for k in ("x", "y", "tx", "ty", "allx", "ally", "graph")}
    with open(os.path.join(src, f"ind.{name}.test.index")) as f:
        test_idx = [int(line.strip()) for line in f if line.strip()]

    test_sorted = sorted(test_idx)
    allx, tx = sparse.csr_matrix(objs["allx"]), sparse.csr_matrix(objs["tx"])
    ally, ty = np.asarray(objs["ally"]), np.asarray(objs["ty"])

    # citeseer's test split has holes; pad missing test rows with zeros
    full_range = list(range(min(test_sorted), max(test_sorted) + 1))
    tx_full = sparse.lil_matrix((len(full_range), tx.shape[1]))
    ty_full = np.zeros((len(full_range), ty.shape[1]))
    pos = {idx: i for i, idx in enumerate(full_range)}
    for row, idx in enumerate(test_idx):
        tx_full[pos[idx]] = tx[row]
        ty_full[pos[idx]] = ty[row]

    # planetoid ids: allx rows are nodes 0..len(allx)-1 and test ids occupy the
    # range right after, so the padded vstack already lands every test row at
    # its node id
    if min(test_sorted) != allx.shape[0]:
        sys.exit("error: unexpected test.index layout; test ids must follow allx rows")
    features = sparse.vstack([allx, sparse.csr_matrix(tx_full)]).toarray()
    labels = np.vstack([ally, ty_full]).argmax(axis=1)

    edges = []
    for u, nbrs in objs["graph"].items():
        for v in nbrs:
            edges.append((int(u), int(v)))
    write_bundle(out_dir, name, features.shape[0], edges, features, labels)


def main():
    ap = argparse.ArgumentParser(description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--name", required=True, help="dataset name, e.g. cora")
    ap.add_argument("--src", required=True, help="directory with the raw files")
    ap.add_argument("--out", default="data", help="output root (default: data)")
    args = ap.parse_args()

    if os.path.exists(os.path.join(args.src, f"{args.name}.content")):
        convert_linqs(args.name, args.src, args.out)
    elif os.path.exists(os.path.join(args.src, f"ind.{args.name}.graph")):
        convert_planetoid(args.name, args.src, args.out)
    else:
        sys.exit(f"error: no {args.name}.content or ind.{args.name}.graph under {args.src}")


if __name__ == "__main__":
    main()
