"""Entity-tracking models: the library model and its competitors.

All models share the same linear embedding structure (an image map V, an
attribute map A, a noun map C, each stored input-dim x m and applied as
M.T @ x) and the same candidate-scoring head, so a comparison isolates the
memory mechanism:

* ``dire-1m`` / ``dire-2m``: build the entity library by soft insertion and
  answer by soft retrieval.  The 2m variant keeps a second library built with
  an output matrix set from the same insertion distributions; attention is
  computed on the input-set library and the retrieved vector read from the
  output-set one, mirroring the memory-network two-set convention.
* ``memn-{1m,2m}-{1h,2h,3h}``: memory network that stores each exposure in
  its own row and aggregates at query time over 1-3 hops; each hop probes
  with the query plus everything retrieved so far, and the sum of retrieved
  vectors feeds candidate scoring.
* ``ff`` / ``rnn``: plain networks without external memory, sigmoid hidden
  layers of configurable width (300 by default).

Forward passes are polymorphic: with ``Var`` parameters they build a
reverse-mode tape (training, gradient checks), with plain arrays they run
tape-free (evaluation) through the exact same kernels.  ``backward`` walks
the tape of a ``ForwardTrace`` and returns per-parameter gradients.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import entity_library as el
from . import numerics
from .autodiff import Var, value_of
from .datagen import Datapoint
from .entity_library import GateParams

VARIANTS = ("dire-1m", "dire-2m",
            "memn-1m-1h", "memn-1m-2h", "memn-1m-3h",
            "memn-2m-1h", "memn-2m-2h", "memn-2m-3h",
            "ff", "rnn")

CKPT_MAGIC = b"ENTTRACKCKPT1\n"


class StaleTraceError(ValueError):
    """Backward was asked to run against parameters the trace was not built with."""


@dataclass
class Dims:
    v: int = 64       # image vector size
    t: int = 32       # attribute vector size
    t_c: int = 32     # noun vector size
    m: int = 64       # multimodal space size
    hidden: int = 300
    n_exposures: int = 12


@dataclass
class DireParams:
    variant: str
    dims: Dims
    V: object
    A: object
    C: object
    gate: GateParams
    V_out: object = None
    A_out: object = None
    probe: str = "retrieved"  # score candidates against r ("retrieved") or q ("query")
    version: int = 0

    def named(self):
        out = [("V", self.V), ("A", self.A), ("C", self.C),
               ("gate_w", self.gate.w), ("gate_b", self.gate.b)]
        if self.V_out is not None:
            out += [("V_out", self.V_out), ("A_out", self.A_out)]
        return out


@dataclass
class MemNParams:
    variant: str
    dims: Dims
    hops: int
    V_in: object
    A_in: object
    C_in: object
    V_out: object
    A_out: object
    C_out: object
    version: int = 0

    @property
    def shared(self) -> bool:
        return self.V_in is self.V_out

    def named(self):
        if self.shared:
            return [("V", self.V_in), ("A", self.A_in), ("C", self.C_in)]
        return [("V_in", self.V_in), ("A_in", self.A_in), ("C_in", self.C_in),
                ("V_out", self.V_out), ("A_out", self.A_out), ("C_out", self.C_out)]


@dataclass
class MlpParams:
    """Feed-forward or simple-recurrent competitor without external memory."""

    variant: str
    dims: Dims
    V: object
    A: object
    C: object
    layers: dict = field(default_factory=dict)
    h0: np.ndarray | None = None  # fixed zero initial state (recurrent variant)
    version: int = 0

    def named(self):
        return [("V", self.V), ("A", self.A), ("C", self.C)] + sorted(self.layers.items())


@dataclass
class ForwardTrace:
    """Everything one forward pass computed, for backprop and inspection."""

    variant: str
    params_version: int
    exposures: list
    query: np.ndarray
    scores: np.ndarray
    distribution: np.ndarray
    gold: int
    loss: float
    steps: list | None = None            # library build log (s_max, p_old, z)
    library: np.ndarray | None = None
    attention: np.ndarray | None = None
    retrieved: np.ndarray | None = None
    hop_attentions: list | None = None
    hidden: list | None = None
    dropout_masks: list | None = None
    loss_var: object = None
    scores_var: object = None


# ---------------------------------------------------------------------------
# initialization


def _init_mat(rng, n_in: int, n_out: int) -> Var:
    bound = 1.0 / np.sqrt(n_in)
    return Var(rng.uniform(-bound, bound, size=(n_in, n_out)))


def init_params(variant: str, dims: Dims, seed: int = 0, probe: str = "retrieved"):
    """Seeded parameter initialization for any model variant."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown model variant {variant!r}; expected one of {VARIANTS}")
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    d = dims
    V = _init_mat(rng, d.v, d.m)
    A = _init_mat(rng, d.t, d.m)
    C = _init_mat(rng, d.t_c, d.m)

    if variant.startswith("dire"):
        gate = GateParams(w=Var(1.0), b=Var(0.0))
        p = DireParams(variant, d, V=V, A=A, C=C, gate=gate, probe=probe)
        if variant == "dire-2m":
            p.V_out = _init_mat(rng, d.v, d.m)
            p.A_out = _init_mat(rng, d.t, d.m)
        return p

    if variant.startswith("memn"):
        hops = int(variant[-2])
        if variant.split("-")[1] == "2m":
            V2, A2, C2 = _init_mat(rng, d.v, d.m), _init_mat(rng, d.t, d.m), _init_mat(rng, d.t_c, d.m)
        else:
            V2, A2, C2 = V, A, C
        return MemNParams(variant, d, hops=hops, V_in=V, A_in=A, C_in=C,
                          V_out=V2, A_out=A2, C_out=C2)

    if variant == "ff":
        in_dim = (d.n_exposures + 1) * d.m
        layers = {
            "W1": _init_mat(rng, in_dim, d.hidden), "b1": Var(np.zeros(d.hidden)),
            "W2": _init_mat(rng, d.hidden, d.hidden), "b2": Var(np.zeros(d.hidden)),
            "W3": _init_mat(rng, d.hidden, d.m), "b3": Var(np.zeros(d.m)),
        }
        return MlpParams(variant, d, V=V, A=A, C=C, layers=layers)

    layers = {
        "Wu": _init_mat(rng, d.m, d.hidden), "Wh": _init_mat(rng, d.hidden, d.hidden),
        "bh": Var(np.zeros(d.hidden)),
        "Wq": _init_mat(rng, d.hidden + d.m, d.hidden), "bq": Var(np.zeros(d.hidden)),
        "Wo": _init_mat(rng, d.hidden, d.m), "bo": Var(np.zeros(d.m)),
    }
    return MlpParams(variant, d, V=V, A=A, C=C, layers=layers, h0=np.zeros(d.hidden))


def eval_view(params):
    """Same parameter container with raw arrays in place of Vars (tape-free)."""
    devar = lambda x: x.value if isinstance(x, Var) else x
    if isinstance(params, DireParams):
        return replace(params, V=devar(params.V), A=devar(params.A), C=devar(params.C),
                       gate=GateParams(devar(params.gate.w), devar(params.gate.b)),
                       V_out=devar(params.V_out) if params.V_out is not None else None,
                       A_out=devar(params.A_out) if params.A_out is not None else None)
    if isinstance(params, MemNParams):
        if params.shared:
            V, A, C = devar(params.V_in), devar(params.A_in), devar(params.C_in)
            return replace(params, V_in=V, A_in=A, C_in=C, V_out=V, A_out=A, C_out=C)
        return replace(params, V_in=devar(params.V_in), A_in=devar(params.A_in),
                       C_in=devar(params.C_in), V_out=devar(params.V_out),
                       A_out=devar(params.A_out), C_out=devar(params.C_out))
    if isinstance(params, MlpParams):
        return replace(params, V=devar(params.V), A=devar(params.A), C=devar(params.C),
                       layers={k: devar(v) for k, v in params.layers.items()})
    raise TypeError(f"not a parameter container: {type(params)}")


# ---------------------------------------------------------------------------
# embedding and scoring (shared head)


def embed_exposure(image, attribute, p):
    """Map an (image, attribute) exposure into the multimodal space."""
    _want(image, p.dims.v, "image")
    _want(attribute, p.dims.t, "attribute")
    return ad.rmatvec(p.V, image) + ad.rmatvec(p.A, attribute)


def embed_query(noun, a1, a2, p):
    """Map a (noun, attribute, attribute) query into the multimodal space."""
    _want(noun, p.dims.t_c, "query noun")
    _want(a1, p.dims.t, "query attribute 1")
    _want(a2, p.dims.t, "query attribute 2")
    return ad.rmatvec(p.C, noun) + ad.rmatvec(p.A, a1) + ad.rmatvec(p.A, a2)


def score_candidates(r, candidates, p):
    """Probability distribution over candidate images.

    Candidates are mapped with the model's scoring image matrix (the output
    set when the variant has one) and compared to r by dot product.
    """
    if len(candidates) == 0:
        raise ValueError("candidate set is empty")
    V = _scoring_V(p)
    return ad.softmax(_candidate_scores(r, candidates, V))


def _scoring_V(p):
    if isinstance(p, DireParams):
        return p.V_out if p.V_out is not None else p.V
    if isinstance(p, MemNParams):
        return p.V_out
    return p.V


def _candidate_scores(probe, candidates, V):
    mapped = ad.stack_rows([ad.rmatvec(V, d) for d in candidates])
    return ad.matvec(mapped, probe)


def _want(x, dim: int, what: str):
    got = value_of(x).shape[0]
    if got != dim:
        raise numerics.DimensionError(f"{what} has dim {got}, expected {dim}")


def _check_datapoint(dp: Datapoint, dims: Dims, fixed_exposures: int | None = None):
    if len(dp.exposures) < 1:
        raise ValueError("datapoint has no exposures")
    if fixed_exposures is not None and len(dp.exposures) != fixed_exposures:
        raise ValueError(f"datapoint has {len(dp.exposures)} exposures, model expects {fixed_exposures}")
    if len(dp.candidates) < 2:
        raise ValueError(f"datapoint has {len(dp.candidates)} candidates, need at least 2")
    if not 0 <= dp.gold < len(dp.candidates):
        raise ValueError(f"gold index {dp.gold} outside 0..{len(dp.candidates) - 1}")
    for i, e in enumerate(dp.exposures):
        if e.image.shape[0] != dims.v:
            raise numerics.DimensionError(f"exposure {i} image has dim {e.image.shape[0]}, expected {dims.v}")
        if e.attribute.shape[0] != dims.t:
            raise numerics.DimensionError(f"exposure {i} attribute has dim {e.attribute.shape[0]}, expected {dims.t}")
    if dp.query_noun.shape[0] != dims.t_c:
        raise numerics.DimensionError(f"query noun has dim {dp.query_noun.shape[0]}, expected {dims.t_c}")
    for i, c in enumerate(dp.candidates):
        if c.shape[0] != dims.v:
            raise numerics.DimensionError(f"candidate {i} has dim {c.shape[0]}, expected {dims.v}")


def _drop(u, dropout, masks):
    if dropout is None:
        return u
    mask = dropout(value_of(u).shape[0])
    masks.append(mask)
    return u * mask


def _finish(trace_kwargs, scores, gold):
    loss = ad.cross_entropy(scores, gold)
    dist = numerics.softmax(value_of(scores))
    return ForwardTrace(scores=value_of(scores).copy(), distribution=dist, gold=gold,
                        loss=float(value_of(loss)),
                        loss_var=loss if isinstance(loss, Var) else None,
                        scores_var=scores if isinstance(scores, Var) else None,
                        **trace_kwargs)


# ---------------------------------------------------------------------------
# forward passes

DropoutFn = Callable[[int], np.ndarray]


def dire_forward(dp: Datapoint, p: DireParams, dropout: DropoutFn | None = None) -> ForwardTrace:
    """Embed exposures, build the entity library, retrieve, score, and lose."""
    _check_datapoint(dp, p.dims)
    masks: list = []
    two = p.V_out is not None

    us = [_drop(embed_exposure(e.image, e.attribute, p), dropout, masks) for e in dp.exposures]
    if two:
        us_out = [_drop(ad.rmatvec(p.V_out, e.image) + ad.rmatvec(p.A_out, e.attribute),
                        dropout, masks) for e in dp.exposures]

    lib = el.init(us[0])
    lib_out = el.init(us_out[0]) if two else lib
    log = []
    for i in range(1, len(us)):
        s = el.similarity_profile(lib, us[i])
        p_old = el.old_probability(s, p.gate)
        z = el.insertion_distribution(s, p_old)
        lib = el.update(lib, us[i], z)
        lib_out = el.update(lib_out, us_out[i], z) if two else lib
        log.append(el.BuildStep(s_max=float(value_of(s).max()),
                                p_old=float(value_of(p_old)),
                                z=value_of(z).copy()))

    q = embed_query(dp.query_noun, dp.query_attrs[0], dp.query_attrs[1], p)
    g = ad.softmax(ad.matvec(lib.E, q))
    r = ad.rmatvec(lib_out.E, g)
    probe = r if p.probe == "retrieved" else q
    scores = _candidate_scores(probe, dp.candidates, _scoring_V(p))

    return _finish(dict(variant=p.variant, params_version=p.version,
                        exposures=[value_of(u).copy() for u in us],
                        query=value_of(q).copy(), steps=log,
                        library=value_of(lib_out.E).copy(),
                        attention=value_of(g).copy(), retrieved=value_of(r).copy(),
                        dropout_masks=masks or None),
                   scores, dp.gold)


def memn_forward(dp: Datapoint, p: MemNParams, dropout: DropoutFn | None = None) -> ForwardTrace:
    """Memory network: one memory row per exposure, query-time hops.

    Hop h probes with q plus everything retrieved so far; the sum of the
    retrieved vectors is the comparison vector for candidate scoring, so with
    shared matrices and a single hop this reduces to the library model's
    retrieval over a never-merging memory.
    """
    if p.hops not in (1, 2, 3):
        raise ValueError(f"hop count must be 1, 2, or 3, got {p.hops}")
    _check_datapoint(dp, p.dims)
    masks: list = []

    us_in = [_drop(ad.rmatvec(p.V_in, e.image) + ad.rmatvec(p.A_in, e.attribute),
                   dropout, masks) for e in dp.exposures]
    if p.shared:
        us_out = us_in
    else:
        us_out = [_drop(ad.rmatvec(p.V_out, e.image) + ad.rmatvec(p.A_out, e.attribute),
                        dropout, masks) for e in dp.exposures]
    M_in = ad.stack_rows(us_in)
    M_out = ad.stack_rows(us_out)

    q = ad.rmatvec(p.C_in, dp.query_noun) + ad.rmatvec(p.A_in, dp.query_attrs[0]) \
        + ad.rmatvec(p.A_in, dp.query_attrs[1])

    probe, retrieved_sum, hop_atts = q, None, []
    for _ in range(p.hops):
        att = ad.softmax(ad.matvec(M_in, probe))
        o = ad.rmatvec(M_out, att)
        hop_atts.append(value_of(att).copy())
        retrieved_sum = o if retrieved_sum is None else retrieved_sum + o
        probe = probe + o

    scores = _candidate_scores(retrieved_sum, dp.candidates, p.V_out)
    return _finish(dict(variant=p.variant, params_version=p.version,
                        exposures=[value_of(u).copy() for u in us_in],
                        query=value_of(q).copy(), library=value_of(M_out).copy(),
                        hop_attentions=hop_atts,
                        retrieved=value_of(retrieved_sum).copy(),
                        dropout_masks=masks or None),
                   scores, dp.gold)


def ff_forward(dp: Datapoint, p: MlpParams, dropout: DropoutFn | None = None) -> ForwardTrace:
    """Two sigmoid hidden layers over the concatenated exposures plus query."""
    _check_datapoint(dp, p.dims, fixed_exposures=p.dims.n_exposures)
    masks: list = []
    L = p.layers

    us = [_drop(embed_exposure(e.image, e.attribute, p), dropout, masks) for e in dp.exposures]
    q = embed_query(dp.query_noun, dp.query_attrs[0], dp.query_attrs[1], p)
    x = ad.concat(us + [q])

    h1 = _drop(ad.sigmoid(ad.rmatvec(L["W1"], x) + L["b1"]), dropout, masks)
    h2 = _drop(ad.sigmoid(ad.rmatvec(L["W2"], h1) + L["b2"]), dropout, masks)
    cmp = ad.rmatvec(L["W3"], h2) + L["b3"]
    scores = _candidate_scores(cmp, dp.candidates, p.V)

    return _finish(dict(variant=p.variant, params_version=p.version,
                        exposures=[value_of(u).copy() for u in us],
                        query=value_of(q).copy(),
                        hidden=[value_of(h1).copy(), value_of(h2).copy()],
                        retrieved=value_of(cmp).copy(), dropout_masks=masks or None),
                   scores, dp.gold)


def rnn_forward(dp: Datapoint, p: MlpParams, dropout: DropoutFn | None = None) -> ForwardTrace:
    """Simple recurrence over the exposures, then a query-conditioned readout."""
    _check_datapoint(dp, p.dims)
    masks: list = []
    L = p.layers

    us = [_drop(embed_exposure(e.image, e.attribute, p), dropout, masks) for e in dp.exposures]
    q = embed_query(dp.query_noun, dp.query_attrs[0], dp.query_attrs[1], p)

    h = p.h0
    for u in us:
        h = ad.sigmoid(ad.rmatvec(L["Wh"], h) + ad.rmatvec(L["Wu"], u) + L["bh"])
    h = _drop(h, dropout, masks)
    hq = _drop(ad.sigmoid(ad.rmatvec(L["Wq"], ad.concat([h, q])) + L["bq"]), dropout, masks)
    cmp = ad.rmatvec(L["Wo"], hq) + L["bo"]
    scores = _candidate_scores(cmp, dp.candidates, p.V)

    return _finish(dict(variant=p.variant, params_version=p.version,
                        exposures=[value_of(u).copy() for u in us],
                        query=value_of(q).copy(),
                        hidden=[value_of(h).copy(), value_of(hq).copy()],
                        retrieved=value_of(cmp).copy(), dropout_masks=masks or None),
                   scores, dp.gold)


def forward(dp: Datapoint, params, dropout: DropoutFn | None = None) -> ForwardTrace:
    if isinstance(params, DireParams):
        return dire_forward(dp, params, dropout)
    if isinstance(params, MemNParams):
        return memn_forward(dp, params, dropout)
    if params.variant == "ff":
        return ff_forward(dp, params, dropout)
    return rnn_forward(dp, params, dropout)


def backward(trace: ForwardTrace, params) -> dict[str, np.ndarray]:
    """Gradients of the trace's loss for every parameter, keyed by name."""
    if trace.loss_var is None:
        raise StaleTraceError("trace has no tape; run the forward pass with Var parameters")
    if trace.variant != params.variant or trace.params_version != params.version:
        raise StaleTraceError(
            f"trace is stale: built for {trace.variant} v{trace.params_version}, "
            f"parameters are {params.variant} v{params.version}")
    leaves = params.named()
    for _, v in leaves:
        v.grad = None
    ad.backward(trace.loss_var)
    grads = {}
    for name, v in leaves:
        grads[name] = v.grad if v.grad is not None else np.zeros_like(v.value)
        v.grad = None
    return grads


def predict(params, dp: Datapoint) -> tuple[int, np.ndarray]:
    """Tape-free prediction: (argmax candidate index, output distribution)."""
    view = eval_view(params) if isinstance(params.named()[0][1], Var) else params
    trace = forward(dp, view)
    return numerics.argmax_first(trace.distribution), trace.distribution


# ---------------------------------------------------------------------------
# checkpoints: magic line, JSON meta line, then raw little-endian float64


def save_checkpoint(params, path, seed_lineage: str = ""):
    leaves = params.named()
    meta = {
        "variant": params.variant,
        "dims": vars(params.dims),
        "seed_lineage": seed_lineage,
        "params": [[name, list(value_of(v).shape)] for name, v in leaves],
    }
    if isinstance(params, DireParams):
        meta["probe"] = params.probe
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(json.dumps(meta, sort_keys=True).encode() + b"\n")
    for _, v in leaves:
        buf.write(np.ascontiguousarray(value_of(v), dtype="<f8").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path):
    with open(path, "rb") as f:
        if f.readline() != CKPT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        meta = json.loads(f.readline())
        blob = f.read()
    params = init_params(meta["variant"], Dims(**meta["dims"]),
                         probe=meta.get("probe", "retrieved"))
    by_name = dict(params.named())
    offset = 0
    for name, shape in meta["params"]:
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).reshape(shape)
        offset += n * 8
        by_name[name].value = arr.astype(np.float64).reshape(shape)
    return params, meta
