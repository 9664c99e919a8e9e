"""The relation extraction network.

Three views feed every entity pair: the local context view (mention
vectors aggregated per entity plus relative-distance features), the
description view (pooled description vectors), and the concept view
(top-K uncertain-KG concepts combined by one of three integration
schemes). Two bilinear interaction vectors are fused through a learned
sigmoid gate, a mixed sentence attention summarizes the document, and a
multi-label sigmoid head scores every relation type independently.

Switching ``cross_view_inference`` off replaces all of that with a plain
concatenation of the per-view representations into a single affine
classifier, which serves as the structural baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .corpus import AnchoredDocument, DISTANCE_TABLE_SIZE, distance_index, min_distance
from .encoder import Encoder, mention_embedding, sentence_representation
from .errors import CompatibilityError, ConfigError, FormatError
from .kg import DescriptionStore, KnowledgeStore

VIEWS = ("two_view", "three_view")
INTEGRATIONS = ("NWI", "AWI", "PWI")


@dataclass
class ModeConfig:
    """Architecture switches; defaults give the full three-view model."""

    views: str = "three_view"
    integration: str = "PWI"
    top_k: int = 3
    cross_view_inference: bool = True
    mixed_attention: bool = True
    use_entity_desp: bool = True
    use_concept_desp: bool = True
    anchor_in_sentpool: bool = True
    normalize_mixed_weights: bool = False

    def validate(self) -> None:
        if self.views not in VIEWS:
            raise ConfigError(f"views must be one of {VIEWS}, got {self.views!r}")
        if self.integration not in INTEGRATIONS:
            raise ConfigError(
                f"integration must be one of {INTEGRATIONS}, got {self.integration!r}")
        if self.top_k < 1:
            raise ConfigError(f"top_k must be at least 1, got {self.top_k}")


@dataclass
class Dimensions:
    model_dim: int = 100
    base_dim: int = 768
    distance_dim: int = 10
    num_relations: int = 1

    def validate(self) -> None:
        for name in ("model_dim", "base_dim", "distance_dim", "num_relations"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")


def build_params(mode: ModeConfig, dims: Dimensions, seed: int = 0) -> ParamStore:
    """Create all trainable tensors for the given architecture.

    Weights are uniform on +-1/sqrt(fan_in) (bilinear fan-in counts both
    input sides), biases start at zero.
    """
    mode.validate()
    dims.validate()
    rng = np.random.default_rng(seed)
    d = dims.model_dim
    store = ParamStore()

    def uniform(name, shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        store.create(name, rng.uniform(-bound, bound, size=shape))

    def zero(name, shape):
        store.create(name, np.zeros(shape))

    uniform("proj.W", (dims.base_dim, d), dims.base_dim)
    zero("proj.b", (d,))
    uniform("dist.table", (DISTANCE_TABLE_SIZE, dims.distance_dim), dims.distance_dim)
    if mode.cross_view_inference:
        side = d + dims.distance_dim
        uniform("fl.W", (side, d, side), side * side)
        zero("fl.b", (d,))
        uniform("fg.W", (2 * d, d, 2 * d), 4 * d * d)
        zero("fg.b", (d,))
        uniform("gate.W", (d, 2 * d), 2 * d)
        zero("gate.b", (d,))
        uniform("cls.W", (dims.num_relations, 2 * d), 2 * d)
        zero("cls.b", (dims.num_relations,))
    else:
        uniform("concat.W", (dims.num_relations, 7 * d), 7 * d)
        zero("concat.b", (dims.num_relations,))
    return store


_REQUIRED = {
    True: ("proj.W", "proj.b", "dist.table", "fl.W", "fl.b", "fg.W", "fg.b",
           "gate.W", "gate.b", "cls.W", "cls.b"),
    False: ("proj.W", "proj.b", "dist.table", "concat.W", "concat.b"),
}


def check_params(mode: ModeConfig, dims: Dimensions, params: ParamStore) -> None:
    """Verify a (possibly loaded) store fits the architecture."""
    for name in _REQUIRED[mode.cross_view_inference]:
        if name not in params:
            raise CompatibilityError(
                f"checkpoint lacks parameter {name!r} required by this mode")
    d = dims.model_dim
    expected = {
        "proj.W": (dims.base_dim, d),
        "proj.b": (d,),
        "dist.table": (DISTANCE_TABLE_SIZE, dims.distance_dim),
    }
    if mode.cross_view_inference:
        side = d + dims.distance_dim
        expected.update({
            "fl.W": (side, d, side), "fl.b": (d,),
            "fg.W": (2 * d, d, 2 * d), "fg.b": (d,),
            "gate.W": (d, 2 * d), "gate.b": (d,),
            "cls.W": (dims.num_relations, 2 * d), "cls.b": (dims.num_relations,),
        })
    else:
        expected.update({
            "concat.W": (dims.num_relations, 7 * d),
            "concat.b": (dims.num_relations,),
        })
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise CompatibilityError(
                f"parameter {name!r} has shape {params[name].shape}, "
                f"this configuration needs {shape}")


# ------------------------------------------------------------- forward pieces ----

def m2e_local_entity(mention_matrix: Tensor, desc_vec: Tensor) -> tuple[Tensor, Tensor]:
    """Attention over an entity's mentions with its description as query.

    Returns (attention weights, aggregated entity vector). A zero query
    degenerates to the plain mention mean.
    """
    scores = ad.matmul(mention_matrix, desc_vec)
    attn = ad.softmax(scores)
    return attn, ad.matmul(attn, mention_matrix)


def local_interactive(h_l: Tensor, t_l: Tensor, emb_ht: Tensor, emb_th: Tensor,
                      params: ParamStore) -> Tensor:
    return ad.bilinear(ad.concat([h_l, emb_ht]), params["fl.W"],
                       ad.concat([t_l, emb_th]), params["fl.b"])


def concept_vector_nwi(concept_matrix: Tensor, is_pad: np.ndarray) -> tuple[np.ndarray, Tensor]:
    """Plain mean over the real (non-pad) concept vectors."""
    real = np.flatnonzero(~is_pad)
    k = len(is_pad)
    if real.size == 0:
        return np.zeros(k), ad.zeros((concept_matrix.shape[1],))
    weights = np.zeros(k)
    weights[real] = 1.0 / real.size
    c = ad.matmul(ad.constant(weights.astype(concept_matrix.dtype)), concept_matrix)
    return weights, c


def concept_vector_awi(concept_matrix: Tensor, is_pad: np.ndarray,
                       query: Tensor) -> tuple[Tensor | np.ndarray, Tensor]:
    """Masked attention over real concepts with the local entity as query."""
    if (~is_pad).sum() == 0:
        return np.zeros(len(is_pad)), ad.zeros((concept_matrix.shape[1],))
    scores = ad.matmul(concept_matrix, query)
    attn = ad.softmax(scores, mask=~is_pad)
    return attn, ad.matmul(attn, concept_matrix)


def concept_vector_pwi(concept_matrix: Tensor, weights: np.ndarray) -> tuple[np.ndarray, Tensor]:
    """Prior-weighted sum; the weights come straight from the KG store."""
    w = ad.constant(np.asarray(weights, dtype=concept_matrix.data.dtype))
    return np.asarray(weights, dtype=np.float64), ad.matmul(w, concept_matrix)


def global_interactive(h_d: Tensor, c_h: Tensor, t_d: Tensor, c_t: Tensor,
                       params: ParamStore) -> Tensor:
    return ad.bilinear(ad.concat([h_d, c_h]), params["fg.W"],
                       ad.concat([t_d, c_t]), params["fg.b"])


def gate_aggregate(u_l: Tensor, u_g: Tensor, params: ParamStore) -> tuple[Tensor, Tensor]:
    """Elementwise convex mix of the two interactive vectors."""
    g = ad.sigmoid(ad.add(ad.matmul(params["gate.W"], ad.concat([u_l, u_g])),
                          params["gate.b"]))
    ones = ad.constant(np.ones(g.shape, dtype=g.data.dtype))
    fused = ad.add(ad.mul(g, u_l), ad.mul(ad.sub(ones, g), u_g))
    return g, fused


def mixed_attention(sentence_matrix: Tensor, u_l: Tensor, u_g: Tensor,
                    support: set[int], use_empirical: bool,
                    normalize: bool) -> tuple[Tensor, Tensor, np.ndarray, Tensor, Tensor]:
    """Blend content attention from both interactive vectors with an
    empirical uniform weight over the sentences that mention the pair.

    Returns (alpha, beta, gamma, combined weights, pooled document vector).
    Weight total is 2 with the empirical term, 1 without; `normalize`
    rescales to sum 1.
    """
    n = sentence_matrix.shape[0]
    if not support:
        raise FormatError("pair has no mention sentences")
    alpha = ad.softmax(ad.matmul(sentence_matrix, u_l))
    beta = ad.softmax(ad.matmul(sentence_matrix, u_g))
    combined = ad.scale(ad.add(alpha, beta), 0.5)
    gamma = np.zeros(n)
    total = 1.0
    if use_empirical:
        gamma[sorted(support)] = 1.0 / len(support)
        combined = ad.add(combined, ad.constant(gamma.astype(sentence_matrix.dtype)))
        total = 2.0
    if normalize:
        combined = ad.scale(combined, 1.0 / total)
    doc_vec = ad.matmul(combined, sentence_matrix)
    return alpha, beta, gamma, combined, doc_vec


def predict(u: Tensor, v: Tensor, params: ParamStore, dropout_ratio: float,
            rng, training: bool) -> Tensor:
    features = ad.concat([u, v])
    if training and dropout_ratio > 0.0:
        features = ad.dropout(features, dropout_ratio, rng, training=True)
    return ad.sigmoid(ad.add(ad.matmul(params["cls.W"], features), params["cls.b"]))


# ------------------------------------------------------------ document state ----

@dataclass
class DocumentState:
    """Everything reusable across the pairs of one document forward pass."""

    adoc: AnchoredDocument
    sentence_reps: list[Tensor]
    mention_vectors: list[Tensor]           # per entity: (t x d) matrix
    desc_vectors: list[Tensor]              # per entity: e_d
    concept_matrices: list[Tensor]          # per entity: (K x d)
    concept_weights: list[np.ndarray]       # per entity: prior weights, pads 0
    concept_pads: list[np.ndarray]          # per entity: bool mask
    mention_sentences: list[set[int]]       # per entity: sentence indices
    sentence_matrix: Tensor = field(init=False)

    def __post_init__(self):
        self.sentence_matrix = ad.stack_rows(self.sentence_reps)


@dataclass
class ForwardTrace:
    """Per-pair intermediates, named by function rather than by symbol."""

    pair: tuple[int, int]
    head_mention_attention: np.ndarray | None
    tail_mention_attention: np.ndarray | None
    head_local: np.ndarray
    tail_local: np.ndarray
    head_desc: np.ndarray
    tail_desc: np.ndarray
    head_concept_weights: np.ndarray
    tail_concept_weights: np.ndarray
    head_concept: np.ndarray
    tail_concept: np.ndarray
    local_pair: np.ndarray | None
    global_pair: np.ndarray | None
    gate: np.ndarray | None
    fused_pair: np.ndarray | None
    sentence_local_attention: np.ndarray | None
    sentence_global_attention: np.ndarray | None
    sentence_empirical: np.ndarray | None
    sentence_weights: np.ndarray | None
    doc_vector: np.ndarray
    scores: Tensor

    def to_json(self) -> dict:
        def out(x):
            if x is None:
                return None
            arr = x.data if isinstance(x, Tensor) else np.asarray(x)
            return [float(v) for v in arr.reshape(-1)]

        return {
            "pair": list(self.pair),
            "head_mention_attention": out(self.head_mention_attention),
            "tail_mention_attention": out(self.tail_mention_attention),
            "head_local": out(self.head_local),
            "tail_local": out(self.tail_local),
            "head_desc": out(self.head_desc),
            "tail_desc": out(self.tail_desc),
            "head_concept_weights": out(self.head_concept_weights),
            "tail_concept_weights": out(self.tail_concept_weights),
            "head_concept": out(self.head_concept),
            "tail_concept": out(self.tail_concept),
            "local_pair": out(self.local_pair),
            "global_pair": out(self.global_pair),
            "gate": out(self.gate),
            "fused_pair": out(self.fused_pair),
            "sentence_local_attention": out(self.sentence_local_attention),
            "sentence_global_attention": out(self.sentence_global_attention),
            "sentence_empirical": out(self.sentence_empirical),
            "sentence_weights": out(self.sentence_weights),
            "doc_vector": out(self.doc_vector),
            "scores": out(self.scores),
        }


class Model:
    """Ties mode, dimensions, parameters and the shared encoder together."""

    def __init__(self, mode: ModeConfig, dims: Dimensions, params: ParamStore,
                 embedder, dropout_ratio: float = 0.2):
        mode.validate()
        dims.validate()
        check_params(mode, dims, params)
        self.mode = mode
        self.dims = dims
        self.params = params
        self.dropout_ratio = dropout_ratio
        self.encoder = Encoder(embedder, params["proj.W"], params["proj.b"],
                               dropout_ratio=dropout_ratio)

    def _zero_vec(self) -> Tensor:
        return ad.zeros((self.dims.model_dim,))

    def prepare_document(self, adoc: AnchoredDocument, kg: KnowledgeStore,
                         descriptions: DescriptionStore,
                         rng: np.random.Generator | None = None,
                         training: bool = False) -> DocumentState:
        doc = adoc.doc
        if self.mode.views == "two_view":
            for ent in doc.entities:
                if len(ent.mentions) != 1:
                    raise ConfigError(
                        f"two_view mode needs exactly one mention per entity; "
                        f"entity {ent.entity_index} of {doc.doc_id!r} has "
                        f"{len(ent.mentions)}")
        spans = [(off, off + len(s))
                 for off, s in zip(adoc.sent_offsets, adoc.sentences)]
        enc = self.encoder.encode(adoc.flat_tokens, sent_spans=spans,
                                  rng=rng, training=training)
        anchor_set = frozenset() if self.mode.anchor_in_sentpool else frozenset(
            p for positions in adoc.anchor_positions for p in positions)
        sentence_reps = [sentence_representation(enc, span, exclude=anchor_set)
                         for span in spans]
        mention_vectors = []
        for ent in doc.entities:
            vecs = [mention_embedding(enc, adoc.anchor_positions[ent.entity_index][mi],
                                      adoc.mention_token_positions[ent.entity_index][mi])
                    for mi in range(len(ent.mentions))]
            mention_vectors.append(ad.stack_rows(vecs))
        desc_vectors = []
        for ent in doc.entities:
            if not self.mode.use_entity_desp:
                desc_vectors.append(self._zero_vec())
                continue
            text = descriptions.description(ent.name, entity_type=ent.entity_type or None)
            desc_vectors.append(self.encoder.description_vector(text, rng=rng,
                                                                training=training))
        concept_cache: dict[str, Tensor] = {}

        def concept_vec(name: str) -> Tensor:
            got = concept_cache.get(name)
            if got is None:
                text = descriptions.description(name)
                got = self.encoder.description_vector(text, rng=rng, training=training)
                concept_cache[name] = got
            return got

        concept_matrices, concept_weights, concept_pads = [], [], []
        for ent in doc.entities:
            bundle = kg.topk_concepts(ent.name, self.mode.top_k)
            pads = np.array(bundle.is_pad, dtype=bool)
            if self.mode.use_concept_desp:
                rows = [self._zero_vec() if pad else concept_vec(name)
                        for name, pad in zip(bundle.concepts, bundle.is_pad)]
            else:
                rows = [self._zero_vec() for _ in bundle.concepts]
            concept_matrices.append(ad.stack_rows(rows))
            concept_weights.append(np.array(bundle.weights, dtype=np.float64))
            concept_pads.append(pads)
        mention_sentences = [{m.sent_idx for m in ent.mentions} for ent in doc.entities]
        return DocumentState(adoc=adoc, sentence_reps=sentence_reps,
                             mention_vectors=mention_vectors, desc_vectors=desc_vectors,
                             concept_matrices=concept_matrices,
                             concept_weights=concept_weights, concept_pads=concept_pads,
                             mention_sentences=mention_sentences)

    def _entity_local(self, state: DocumentState, ei: int) -> tuple[np.ndarray, Tensor]:
        mentions = state.mention_vectors[ei]
        if self.mode.views == "two_view":
            return np.array([1.0]), ad.select_row(mentions, 0)
        if not self.mode.cross_view_inference:
            # attention queries are cross-view links; the baseline averages
            return (np.full(mentions.shape[0], 1.0 / mentions.shape[0]),
                    ad.pool(mentions, "mean"))
        attn, e_l = m2e_local_entity(mentions, state.desc_vectors[ei])
        return attn.data.copy(), e_l

    def _entity_concept(self, state: DocumentState, ei: int,
                        e_l: Tensor) -> tuple[np.ndarray, Tensor]:
        matrix = state.concept_matrices[ei]
        pads = state.concept_pads[ei]
        if self.mode.integration == "NWI":
            weights, c = concept_vector_nwi(matrix, pads)
            return weights, c
        if self.mode.integration == "AWI":
            attn, c = concept_vector_awi(matrix, pads, e_l)
            return (attn.data.copy() if isinstance(attn, Tensor) else attn), c
        weights, c = concept_vector_pwi(matrix, state.concept_weights[ei])
        return weights, c

    def forward_pair(self, state: DocumentState, head: int, tail: int,
                     rng: np.random.Generator | None = None,
                     training: bool = False) -> ForwardTrace:
        if head == tail:
            raise ConfigError("head and tail must differ")
        h_attn, h_l = self._entity_local(state, head)
        t_attn, t_l = self._entity_local(state, tail)
        h_d = state.desc_vectors[head]
        t_d = state.desc_vectors[tail]
        hc_w, c_h = self._entity_concept(state, head, h_l)
        tc_w, c_t = self._entity_concept(state, tail, t_l)
        support = state.mention_sentences[head] | state.mention_sentences[tail]

        if not self.mode.cross_view_inference:
            mean_s = ad.pool(state.sentence_matrix, "mean")
            features = ad.concat([h_l, t_l, h_d, t_d, c_h, c_t, mean_s])
            if training and self.dropout_ratio > 0.0:
                features = ad.dropout(features, self.dropout_ratio, rng, training=True)
            scores = ad.sigmoid(ad.add(ad.matmul(self.params["concat.W"], features),
                                       self.params["concat.b"]))
            return ForwardTrace(
                pair=(head, tail),
                head_mention_attention=h_attn, tail_mention_attention=t_attn,
                head_local=h_l.data.copy(), tail_local=t_l.data.copy(),
                head_desc=h_d.data.copy(), tail_desc=t_d.data.copy(),
                head_concept_weights=np.asarray(hc_w, dtype=np.float64),
                tail_concept_weights=np.asarray(tc_w, dtype=np.float64),
                head_concept=c_h.data.copy(), tail_concept=c_t.data.copy(),
                local_pair=None, global_pair=None, gate=None, fused_pair=None,
                sentence_local_attention=None, sentence_global_attention=None,
                sentence_empirical=None, sentence_weights=None,
                doc_vector=mean_s.data.copy(), scores=scores)

        d_ht = min_distance(state.adoc, head, tail)
        emb_ht = ad.select_row(self.params["dist.table"], distance_index(d_ht))
        emb_th = ad.select_row(self.params["dist.table"], distance_index(-d_ht))
        u_l = local_interactive(h_l, t_l, emb_ht, emb_th, self.params)
        u_g = global_interactive(h_d, c_h, t_d, c_t, self.params)
        g, u = gate_aggregate(u_l, u_g, self.params)
        alpha, beta, gamma, combined, v = mixed_attention(
            state.sentence_matrix, u_l, u_g, support,
            use_empirical=self.mode.mixed_attention,
            normalize=self.mode.normalize_mixed_weights)
        scores = predict(u, v, self.params, self.dropout_ratio, rng, training)
        return ForwardTrace(
            pair=(head, tail),
            head_mention_attention=h_attn, tail_mention_attention=t_attn,
            head_local=h_l.data.copy(), tail_local=t_l.data.copy(),
            head_desc=h_d.data.copy(), tail_desc=t_d.data.copy(),
            head_concept_weights=np.asarray(hc_w, dtype=np.float64),
            tail_concept_weights=np.asarray(tc_w, dtype=np.float64),
            head_concept=c_h.data.copy(), tail_concept=c_t.data.copy(),
            local_pair=u_l.data.copy(), global_pair=u_g.data.copy(),
            gate=g.data.copy(), fused_pair=u.data.copy(),
            sentence_local_attention=alpha.data.copy(),
            sentence_global_attention=beta.data.copy(),
            sentence_empirical=gamma,
            sentence_weights=combined.data.copy(),
            doc_vector=v.data.copy(), scores=scores)


def learning_rates(params: ParamStore, lr_encoder: float,
                   lr_other: float) -> Mapping[str, float]:
    """Per-parameter rates: the projection group trains at the encoder
    rate, everything else at the head rate."""
    return {name: (lr_encoder if name.startswith("proj.") else lr_other)
            for name in params.names()}
