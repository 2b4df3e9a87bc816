"""The GRU scoring network, with hand-written forward and backward passes.

One GRU layer maps the current item (plus the carried hidden state) to a new
hidden state; item scores are dot products of that state with rows of the
output matrix.  During training only the slate rows (targets + sampled
negatives) are ever scored or updated; scoring everything is reserved for
evaluation.

Three ways to feed items in:

* ``onehot``   the input weights are (N, H); feeding item a is a row select.
* ``separate`` a free embedding matrix E (N, d_e) in front of (d_e, H)
               input weights.
* ``tied``     the output matrix doubles as the embedding (d_e = H); its
               rows receive gradient from both roles.

Backpropagation is truncated: each step's record can push its hidden-state
gradient to the previous step's record, and the trainer decides how many
steps to chain (default 1: gradients stay within the step).
"""

import io
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

EMBEDDING_MODES = ("onehot", "separate", "tied")
ACTIVATIONS = ("identity", "tanh")

MODEL_MAGIC = "sessionrec-model-v1"


class ModelError(Exception):
    pass


def combine_rows(idx, val):
    """Sum rows of ``val`` that share an index; returns (unique_idx, sums)."""
    order = np.argsort(idx, kind="stable")
    idx_sorted = idx[order]
    val_sorted = val[order]
    starts = np.concatenate(([0], np.flatnonzero(np.diff(idx_sorted)) + 1))
    return idx_sorted[starts], np.add.reduceat(val_sorted, starts, axis=0)


@dataclass
class SparseRows:
    """Gradient touching only some rows of a large matrix (or entries of a
    vector): ``idx`` is unique and sorted, ``val[i]`` belongs to row idx[i]."""

    idx: np.ndarray
    val: np.ndarray


class GradBag:
    """Accumulates dense and row-sparse gradient contributions by name."""

    def __init__(self):
        self._dense = {}
        self._rows = {}

    def add_dense(self, name, arr):
        if name in self._dense:
            self._dense[name] += arr
        else:
            self._dense[name] = arr

    def add_rows(self, name, idx, val):
        self._rows.setdefault(name, []).append((idx, val))

    def finalize(self):
        grads = dict(self._dense)
        for name, parts in self._rows.items():
            idx = np.concatenate([p[0] for p in parts])
            val = np.concatenate([p[1] for p in parts], axis=0)
            uniq, summed = combine_rows(idx, val)
            grads[name] = SparseRows(uniq, summed)
        return grads


class GruParams:
    """All trainable arrays plus the structural flags that shape them."""

    def __init__(self, n_items, hidden, embedding="onehot", embed_dim=None,
                 activation="identity", output_bias=False, dtype=np.float32,
                 seed=0, init=True):
        if embedding not in EMBEDDING_MODES:
            raise ModelError(f"unknown embedding mode {embedding!r}")
        if activation not in ACTIVATIONS:
            raise ModelError(f"unknown output activation {activation!r}")
        if embedding == "separate":
            if not embed_dim:
                raise ModelError("separate embedding requires embed_dim")
        elif embedding == "tied":
            if embed_dim not in (None, hidden):
                raise ModelError("tied embedding forces embed_dim == hidden")
            embed_dim = hidden
        else:
            embed_dim = 0
        self.n_items = int(n_items)
        self.hidden = int(hidden)
        self.embedding = embedding
        self.embed_dim = int(embed_dim or 0)
        self.activation = activation
        self.output_bias = bool(output_bias)
        self.dtype = np.dtype(dtype)

        n, h = self.n_items, self.hidden
        d_in = {"onehot": n, "separate": self.embed_dim, "tied": h}[embedding]
        shapes = []
        if embedding == "separate":
            shapes.append(("E", (n, self.embed_dim)))
        shapes += [("Wz", (d_in, h)), ("Wr", (d_in, h)), ("Wh", (d_in, h)),
                   ("Uz", (h, h)), ("Ur", (h, h)), ("Uh", (h, h)),
                   ("bz", (h,)), ("br", (h,)), ("bh", (h,)),
                   ("Wy", (n, h))]
        if output_bias:
            shapes.append(("by", (n,)))
        self.arrays = {}
        rng = np.random.default_rng(seed)
        for name, shape in shapes:
            if init and not name.startswith("b"):
                bound = np.sqrt(6.0 / (shape[0] + shape[1]))
                arr = rng.uniform(-bound, bound, size=shape)
            else:
                arr = np.zeros(shape)
            self.arrays[name] = arr.astype(self.dtype)

    def __getattr__(self, name):
        arrays = self.__dict__.get("arrays")
        if arrays is not None and name in arrays:
            return arrays[name]
        raise AttributeError(name)

    def param_count(self):
        return sum(a.size for a in self.arrays.values())

    def input_vectors(self, items):
        """Embedding rows for the given items; None in one-hot mode."""
        if self.embedding == "onehot":
            return None
        if self.embedding == "separate":
            return self.arrays["E"][items]
        return self.arrays["Wy"][items]

    def zero_hidden(self, batch_size):
        return np.zeros((batch_size, self.hidden), dtype=self.dtype)

    def astype(self, dtype):
        """Copy with a different float width (e.g. float64 gradient checks)."""
        out = GruParams(self.n_items, self.hidden, self.embedding,
                        self.embed_dim or None, self.activation,
                        self.output_bias, dtype=dtype, init=False)
        for name, arr in self.arrays.items():
            out.arrays[name][...] = arr
        return out


@dataclass
class StepRecord:
    """Activations of one forward step, kept for the backward pass."""

    items: np.ndarray
    x: np.ndarray          # input vectors; None in one-hot mode
    h_prev: np.ndarray     # hidden after reset, before the step
    z: np.ndarray
    r: np.ndarray
    hbar: np.ndarray
    h_out: np.ndarray      # new hidden after dropout (what got scored)
    dropout_mask: np.ndarray
    reset_mask: np.ndarray
    slots: np.ndarray
    slate: np.ndarray
    scores: np.ndarray


def forward_step(params, inputs, hidden, reset_mask, slate_items=None,
                 dropout_mask=None, keep_record=False):
    """Advance one GRU step and score the slate items.

    ``hidden`` is (B, H) and is not modified; slots flagged in
    ``reset_mask`` start from zero.  ``slate_items`` is a shared 1-D array
    of item ids scored for every example (scores shape (B, len(slate)));
    pass None to skip scoring.  ``dropout_mask`` is pre-scaled (entries 0 or
    1/keep) and is applied to the new hidden state.
    """
    a = params.arrays
    inputs = np.asarray(inputs)
    h = np.array(hidden, copy=True)
    if reset_mask is not None and reset_mask.any():
        h[reset_mask] = 0

    x = params.input_vectors(inputs)
    if params.embedding == "onehot":
        xz, xr, xh = a["Wz"][inputs], a["Wr"][inputs], a["Wh"][inputs]
    else:
        xz, xr, xh = x @ a["Wz"], x @ a["Wr"], x @ a["Wh"]

    z = expit(xz + h @ a["Uz"] + a["bz"])
    r = expit(xr + h @ a["Ur"] + a["br"])
    hbar = np.tanh(xh + (r * h) @ a["Uh"] + a["bh"])
    h_new = (1.0 - z) * h + z * hbar
    h_out = h_new if dropout_mask is None else h_new * dropout_mask

    scores = None
    if slate_items is not None:
        scores = h_out @ a["Wy"][slate_items].T
        if params.output_bias:
            scores += a["by"][slate_items]
        if params.activation == "tanh":
            scores = np.tanh(scores)

    if not keep_record:
        return h_out, scores
    record = StepRecord(items=inputs, x=x, h_prev=h, z=z, r=r, hbar=hbar,
                        h_out=h_out, dropout_mask=dropout_mask,
                        reset_mask=reset_mask, slots=None, slate=slate_items,
                        scores=scores)
    return h_out, scores, record


def score_all(params, hidden):
    """Scores of every item for each example's hidden state (eval path)."""
    a = params.arrays
    scores = hidden @ a["Wy"].T
    if params.output_bias:
        scores = scores + a["by"]
    if params.activation == "tanh":
        scores = np.tanh(scores)
    return scores


def _backward_scores(params, record, d_scores, bag):
    """Gradient of the scoring layer; returns d(h_out)."""
    a = params.arrays
    if params.activation == "tanh":
        d_lin = d_scores * (1.0 - record.scores * record.scores)
    else:
        d_lin = d_scores
    w_slate = a["Wy"][record.slate]
    d_h_out = d_lin @ w_slate
    bag.add_rows("Wy", record.slate.astype(np.int64), d_lin.T @ record.h_out)
    if params.output_bias:
        bag.add_rows("by", record.slate.astype(np.int64), d_lin.sum(axis=0))
    return d_h_out


def _backward_cell(params, record, d_h_out, bag):
    """Gradient of one GRU step given d(h_out); returns d(h before reset)."""
    a = params.arrays
    h, z, r, hbar = record.h_prev, record.z, record.r, record.hbar

    d_h_new = d_h_out if record.dropout_mask is None else d_h_out * record.dropout_mask
    d_z = d_h_new * (hbar - h)
    d_hbar = d_h_new * z
    d_h = d_h_new * (1.0 - z)

    d_pre_h = d_hbar * (1.0 - hbar * hbar)
    d_rh = d_pre_h @ a["Uh"].T
    d_h += d_rh * r
    d_pre_r = (d_rh * h) * r * (1.0 - r)
    d_pre_z = d_z * z * (1.0 - z)
    d_h += d_pre_z @ a["Uz"].T + d_pre_r @ a["Ur"].T

    bag.add_dense("Uh", (r * h).T @ d_pre_h)
    bag.add_dense("Uz", h.T @ d_pre_z)
    bag.add_dense("Ur", h.T @ d_pre_r)
    bag.add_dense("bh", d_pre_h.sum(axis=0))
    bag.add_dense("bz", d_pre_z.sum(axis=0))
    bag.add_dense("br", d_pre_r.sum(axis=0))

    items = record.items.astype(np.int64)
    if params.embedding == "onehot":
        bag.add_rows("Wz", items, d_pre_z)
        bag.add_rows("Wr", items, d_pre_r)
        bag.add_rows("Wh", items, d_pre_h)
    else:
        x = record.x
        bag.add_dense("Wz", x.T @ d_pre_z)
        bag.add_dense("Wr", x.T @ d_pre_r)
        bag.add_dense("Wh", x.T @ d_pre_h)
        d_x = d_pre_z @ a["Wz"].T + d_pre_r @ a["Wr"].T + d_pre_h @ a["Wh"].T
        bag.add_rows("E" if params.embedding == "separate" else "Wy", items, d_x)

    if record.reset_mask is not None and record.reset_mask.any():
        d_h[record.reset_mask] = 0
    return d_h


def backward_step(params, record, d_scores):
    """Exact parameter gradients of one step's slate loss (truncation 1)."""
    bag = GradBag()
    d_h_out = _backward_scores(params, record, d_scores, bag)
    _backward_cell(params, record, d_h_out, bag)
    return bag.finalize()


def backward_through(params, records, d_scores):
    """Backpropagate the newest record's slate loss through up to
    ``len(records)`` steps (records ordered oldest to newest).

    The hidden-state gradient flows backwards along matching slot ids and
    stops at session boundaries (reset positions).
    """
    bag = GradBag()
    last = records[-1]
    d_h_out = _backward_scores(params, last, d_scores, bag)
    for i in range(len(records) - 1, -1, -1):
        rec = records[i]
        d_h = _backward_cell(params, rec, d_h_out, bag)
        if i == 0 or not np.any(d_h):
            break
        prev = records[i - 1]
        if prev.slots is None or rec.slots is None:
            d_h_out = d_h  # same slots throughout
            continue
        d_h_out = np.zeros_like(prev.h_out)
        pos_in_prev = {int(s): j for j, s in enumerate(prev.slots)}
        for j, s in enumerate(rec.slots):
            p = pos_in_prev.get(int(s))
            if p is not None:
                d_h_out[p] = d_h[j]
    return bag.finalize()


def save_model(params, path, meta=None, items_file=None):
    """Write the model file: text header, then raw little-endian float32.

    Arrays are dumped in declaration order; the round trip through
    ``load_model`` is bit-exact.
    """
    if params.dtype != np.float32:
        raise ModelError("model files store float32; train width is float32")
    header = io.StringIO()
    header.write(MODEL_MAGIC + "\n")
    header.write(f"n_items={params.n_items}\n")
    header.write(f"hidden={params.hidden}\n")
    header.write(f"embedding={params.embedding}\n")
    header.write(f"embed_dim={params.embed_dim}\n")
    header.write(f"activation={params.activation}\n")
    header.write(f"output_bias={int(params.output_bias)}\n")
    if items_file:
        header.write(f"items_file={items_file}\n")
    for key, value in (meta or {}).items():
        header.write(f"meta.{key}={value}\n")
    arrays = ",".join(
        f"{name}:{'x'.join(str(d) for d in arr.shape)}"
        for name, arr in params.arrays.items())
    header.write(f"arrays={arrays}\n")
    header.write("end\n")
    with open(path, "wb") as fh:
        fh.write(header.getvalue().encode("utf-8"))
        for arr in params.arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_model(path):
    """Read a model file; returns (GruParams, meta dict)."""
    with open(path, "rb") as fh:
        first = fh.readline().decode("utf-8").rstrip("\n")
        if first != MODEL_MAGIC:
            raise ModelError(f"{path}: not a model file (bad magic {first!r})")
        fields = {}
        while True:
            line = fh.readline().decode("utf-8").rstrip("\n")
            if line == "end":
                break
            if not line:
                raise ModelError(f"{path}: truncated header")
            key, _, value = line.partition("=")
            fields[key] = value
        params = GruParams(
            n_items=int(fields["n_items"]), hidden=int(fields["hidden"]),
            embedding=fields["embedding"],
            embed_dim=int(fields["embed_dim"]) or None,
            activation=fields["activation"],
            output_bias=bool(int(fields["output_bias"])),
            dtype=np.float32, init=False)
        declared = []
        for part in fields["arrays"].split(","):
            name, _, shape = part.partition(":")
            declared.append((name, tuple(int(d) for d in shape.split("x"))))
        if [n for n, _ in declared] != list(params.arrays):
            raise ModelError(f"{path}: array list does not match the declared "
                             "model structure")
        for name, shape in declared:
            if params.arrays[name].shape != shape:
                raise ModelError(f"{path}: bad shape for {name}")
            n_bytes = int(np.prod(shape)) * 4
            buf = fh.read(n_bytes)
            if len(buf) != n_bytes:
                raise ModelError(f"{path}: truncated array {name}")
            params.arrays[name] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
    meta = {k[len("meta."):]: v for k, v in fields.items() if k.startswith("meta.")}
    if "items_file" in fields:
        meta["items_file"] = fields["items_file"]
    return params, meta
