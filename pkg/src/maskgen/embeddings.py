"""Single-stream input composition.

Layout of one composed input (text positions first, visual positions last)::

    [SPEC] x_1 .. x_m [SEP] y_1 .. y_{t-1} [MASK] [SEP] r_1 .. r_k

The source block (``x`` plus its ``[SEP]``) is absent for image-to-text
inputs and the region block is absent for text-to-text inputs. Every row is
token-or-visual embedding + position + segment; rows on the text side of an
image-conditioned input also receive the projected full-image feature.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .vocab import MASK, RESERVED, SEP, STOP

MASK_ID = RESERVED.index(MASK)
SEP_ID = RESERVED.index(SEP)
STOP_ID = RESERVED.index(STOP)

SEG_SRC, SEG_TGT, SEG_VIS = 0, 1, 2
N_SEGMENTS = 3


class Modality(str, enum.Enum):
    TEXT_TO_TEXT = "text_to_text"
    IMAGE_TO_TEXT = "image_to_text"
    IMAGE_TEXT_TO_TEXT = "image_text_to_text"

    @property
    def has_source(self) -> bool:
        return self is not Modality.IMAGE_TO_TEXT

    @property
    def has_image(self) -> bool:
        return self is not Modality.TEXT_TO_TEXT


@dataclass(frozen=True, eq=False)
class RegionFeature:
    feat: np.ndarray
    bbox: tuple[float, float, float, float]
    width: float
    height: float
    conf: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "feat", np.asarray(self.feat, dtype=np.float64).reshape(-1))
        object.__setattr__(self, "bbox", tuple(float(c) for c in self.bbox))
        _check_box(self)
        if not 0.0 <= self.conf <= 1.0:
            raise ValueError(f"confidence {self.conf} outside [0, 1]")

    @property
    def is_full_image(self) -> bool:
        x1, y1, x2, y2 = self.bbox
        return x1 == 0 and y1 == 0 and x2 == self.width and y2 == self.height

    def normalized_box(self) -> np.ndarray:
        x1, y1, x2, y2 = self.bbox
        return np.array([x1 / self.width, y1 / self.height, x2 / self.width, y2 / self.height])

    def same_as(self, other: "RegionFeature") -> bool:
        return (self.bbox == other.bbox and self.width == other.width
                and self.height == other.height and self.conf == other.conf
                and np.array_equal(self.feat, other.feat))

    def to_json(self) -> dict:
        return {"feat": [float(v) for v in self.feat], "bbox": list(self.bbox),
                "w": self.width, "h": self.height, "conf": self.conf}

    @classmethod
    def from_json(cls, obj: Mapping) -> "RegionFeature":
        return cls(obj["feat"], tuple(obj["bbox"]), obj["w"], obj["h"], obj.get("conf", 1.0))


def _check_box(r: RegionFeature) -> None:
    x1, y1, x2, y2 = r.bbox
    if r.width <= 0 or r.height <= 0:
        raise ValueError(f"image size must be positive, got {r.width}x{r.height}")
    if not (0 <= x1 < x2 <= r.width and 0 <= y1 < y2 <= r.height):
        raise ValueError(f"invalid or degenerate box {r.bbox} for a {r.width}x{r.height} image")


def full_image_region(feat, width: float, height: float) -> RegionFeature:
    return RegionFeature(feat, (0.0, 0.0, float(width), float(height)), width, height, 1.0)


@dataclass(frozen=True, eq=False)
class Conditioning:
    """Everything the model is conditioned on besides the target prefix."""

    modality: Modality
    spec_id: int
    src: tuple[int, ...] | None = None
    regions: tuple[RegionFeature, ...] | None = None
    full_image: RegionFeature | None = None

    def __post_init__(self):
        m = self.modality
        if m.has_source != (self.src is not None):
            raise ValueError(f"{m.value} input {'needs' if m.has_source else 'must not have'} a source")
        if m.has_image != (self.regions is not None):
            raise ValueError(f"{m.value} input {'needs' if m.has_image else 'must not have'} regions")
        if self.src is not None:
            object.__setattr__(self, "src", tuple(int(i) for i in self.src))
        if self.regions is not None:
            object.__setattr__(self, "regions", tuple(self.regions))

    def with_regions(self, regions, full_image) -> "Conditioning":
        return Conditioning(self.modality, self.spec_id, self.src, regions, full_image)

    def with_spec(self, spec_id: int) -> "Conditioning":
        return Conditioning(self.modality, spec_id, self.src, self.regions, self.full_image)


@dataclass(frozen=True, eq=False)
class ComposedInput:
    embeddings: nx.Tensor          # (length, d_model)
    mask_index: int
    token_ids: tuple[int, ...]     # text positions only
    segment_ids: tuple[int, ...]
    position_ids: tuple[int, ...]

    @property
    def length(self) -> int:
        return len(self.segment_ids)


def embed_tokens(ids: Sequence[int], table: nx.Tensor) -> nx.Tensor:
    return nx.embedding(table, ids)


def embed_positions(length: int, table: nx.Tensor) -> nx.Tensor:
    if length > table.shape[0]:
        raise ValueError(f"sequence length {length} exceeds max positions {table.shape[0]}")
    return nx.embedding(table, np.arange(length))


def geometric_embedding(r: RegionFeature, projection: nx.Tensor) -> nx.Tensor:
    _check_box(r)
    return nx.matmul(nx.Tensor(r.normalized_box()[None, :]), projection)


def embed_regions(regions: Sequence[RegionFeature], feat_w: nx.Tensor, feat_b: nx.Tensor,
                  geo_w: nx.Tensor) -> nx.Tensor:
    """Projected feature + geometric embedding, one row per region."""
    if not regions:
        raise ValueError("need at least one region")
    dv = regions[0].feat.size
    if any(r.feat.size != dv for r in regions):
        raise ValueError("regions disagree on feature width")
    if dv != feat_w.shape[0]:
        raise ValueError(f"region feature width {dv} does not match projection input {feat_w.shape[0]}")
    for r in regions:
        _check_box(r)
    feats = nx.Tensor(np.stack([r.feat for r in regions]))
    boxes = nx.Tensor(np.stack([r.normalized_box() for r in regions]))
    return nx.add(nx.add(nx.matmul(feats, feat_w), feat_b), nx.matmul(boxes, geo_w))


def select_regions(regions: Sequence[RegionFeature], k_min: int, k_max: int
                   ) -> tuple[list[RegionFeature], bool]:
    """Keep the ``k_max`` most confident regions (stable on ties).

    Returns the kept regions and a flag set when fewer than ``k_min`` exist.
    """
    if k_min > k_max:
        raise ValueError(f"k_min={k_min} exceeds k_max={k_max}")
    if not regions:
        raise ValueError("empty region list")
    order = sorted(range(len(regions)), key=lambda i: -regions[i].conf)
    kept = [regions[i] for i in order[:k_max]]
    return kept, len(regions) < k_min


def layout(cond: Conditioning, prefix: Sequence[int]) -> tuple[list[int], list[int], int]:
    """Text token ids, segment ids for the whole stream, and the mask index."""
    ids = [cond.spec_id]
    segs = [SEG_SRC]
    if cond.modality.has_source:
        ids += list(cond.src) + [SEP_ID]
        segs += [SEG_SRC] * (len(cond.src) + 1)
    mask_index = len(ids) + len(prefix)
    ids += list(prefix) + [MASK_ID, SEP_ID]
    segs += [SEG_TGT] * (len(prefix) + 2)
    if cond.modality.has_image:
        segs += [SEG_VIS] * len(cond.regions)
    return ids, segs, mask_index


def compose_input(cond: Conditioning, prefix: Sequence[int], params: Mapping[str, nx.Tensor]
                  ) -> ComposedInput:
    prefix = [int(i) for i in prefix]
    if MASK_ID in prefix or STOP_ID in prefix:
        raise ValueError("target prefix must not contain [MASK] or [STOP]")
    ids, segs, mask_index = layout(cond, prefix)
    x = embed_tokens(ids, params["tok_emb"])
    if cond.modality.has_image:
        if cond.full_image is None:
            raise ValueError("image-conditioned input needs a full-image feature")
        if not cond.regions:
            raise ValueError("image-conditioned input needs at least one region")
        whole = nx.add(nx.matmul(nx.Tensor(cond.full_image.feat[None, :]), params["vis_proj.w"]),
                       params["vis_proj.b"])
        x = nx.add(x, whole)
        vis = embed_regions(cond.regions, params["vis_proj.w"], params["vis_proj.b"],
                            params["geo_proj.w"])
        x = nx.concat([x, vis], axis=0)
    length = len(segs)
    x = nx.add(x, embed_positions(length, params["pos_emb"]))
    x = nx.add(x, nx.embedding(params["seg_emb"], segs))
    return ComposedInput(x, mask_index, tuple(ids), tuple(segs), tuple(range(length)))
