"""Prompt construction, embedding backends, guidance loss, and view selection.

Two kinds of guidance plug into the optimizer:

* embedding backends (real vision-language encoder, HTTP remote, or the
  deterministic hash backend) expose embed_text / embed_images and drive the
  cosine-similarity loss;
* MockGuidance scores renders directly against a known ground-truth vertex
  mask, which makes desk-scale end-to-end tests possible without pretrained
  weights.
"""

import hashlib
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .field import HighlighterField, evaluate_highlight
from .mesh import Mesh
from .render import (Camera, RenderConfig, augment_perspective, blend_colors,
                     rasterize, render_views, shade_image)

DEFAULT_TEMPLATE = "A 3D render of a gray [object] with highlighted [region]"


class GuidanceError(Exception):
    pass


class BackendUnavailableError(GuidanceError):
    """The requested embedding backend cannot be constructed or reached."""


@dataclass(frozen=True)
class PromptSpec:
    object_name: str
    region_name: str
    template: str = DEFAULT_TEMPLATE

    def __post_init__(self):
        if not self.object_name.strip():
            raise GuidanceError("object name must be non-empty")
        if not self.region_name.strip():
            raise GuidanceError("region name must be non-empty")
        if "[object]" not in self.template or "[region]" not in self.template:
            raise GuidanceError("template must contain [object] and [region] slots")

    def to_dict(self) -> dict:
        return {"object_name": self.object_name, "region_name": self.region_name,
                "template": self.template}


def build_prompt(spec: PromptSpec) -> str:
    return spec.template.replace("[object]", spec.object_name).replace(
        "[region]", spec.region_name)


# ---------------------------------------------------------------------------
# text-embedding cache


class TextEmbeddingCache:
    """Disk-persisted (model id, text) -> embedding cache; thread-safe."""

    def __init__(self, directory=None):
        self._dir = Path(directory) if directory is not None else None
        if self._dir is not None:
            self._dir.mkdir(parents=True, exist_ok=True)
        self._mem: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    @staticmethod
    def _key(model_id: str, text: str) -> str:
        return hashlib.sha256(f"{model_id}\x00{text}".encode("utf-8")).hexdigest()

    def get(self, model_id: str, text: str):
        key = self._key(model_id, text)
        with self._lock:
            if key in self._mem:
                return self._mem[key].copy()
            if self._dir is not None:
                path = self._dir / f"{key}.npy"
                if path.exists():
                    vec = np.load(path)
                    self._mem[key] = vec
                    return vec.copy()
        return None

    def put(self, model_id: str, text: str, vec: np.ndarray) -> None:
        key = self._key(model_id, text)
        vec = np.asarray(vec, dtype=np.float32)
        with self._lock:
            self._mem[key] = vec
            if self._dir is not None:
                np.save(self._dir / f"{key}.npy", vec)


# ---------------------------------------------------------------------------
# backends


def _images_to_torch(images) -> tuple[torch.Tensor, bool]:
    if isinstance(images, torch.Tensor):
        return images, True
    if isinstance(images, (list, tuple)):
        if len(images) and isinstance(images[0], torch.Tensor):
            return torch.stack(list(images)), True
        return torch.from_numpy(np.stack([np.asarray(i) for i in images])), False
    return torch.from_numpy(np.asarray(images)), False


class HashEmbeddingBackend:
    """Deterministic stand-in encoder: hash-seeded text vectors and a fixed
    random projection of pooled pixels for images. Differentiable for torch
    image input."""

    def __init__(self, embed_dim: int = 768, seed: int = 0):
        self.embed_dim = embed_dim
        self.deterministic = True
        self.model_id = f"hash-{embed_dim}-{seed}"
        gen = torch.Generator().manual_seed(seed)
        self._proj = torch.randn(192, embed_dim, generator=gen, dtype=torch.float64)
        self._proj /= np.sqrt(192.0)

    def embed_text(self, text: str) -> np.ndarray:
        if not text:
            raise GuidanceError("cannot embed empty text")
        digest = hashlib.sha256(text.encode("utf-8")).digest()
        rng = np.random.RandomState(int.from_bytes(digest[:4], "little"))
        vec = rng.standard_normal(self.embed_dim)
        return (vec / np.linalg.norm(vec)).astype(np.float32)

    def embed_images(self, images):
        batch, was_torch = _images_to_torch(images)
        if batch.ndim != 4 or batch.shape[-1] != 3:
            raise GuidanceError("images must be (n, H, W, 3)")
        chan = batch.permute(0, 3, 1, 2)
        pooled = torch.nn.functional.adaptive_avg_pool2d(chan, (8, 8))
        feats = pooled.reshape(len(batch), -1) @ self._proj.to(batch.dtype)
        feats = feats / feats.norm(dim=1, keepdim=True).clamp_min(1e-12)
        return feats if was_torch else feats.numpy()


class ClipBackend:
    """Pretrained CLIP text/image encoders (requires transformers + weights)."""

    def __init__(self, model_id: str = "openai/clip-vit-large-patch14", device: str = "cpu"):
        try:
            from transformers import CLIPModel, CLIPProcessor
        except ImportError as e:
            raise BackendUnavailableError(
                "transformers is not installed; install meshmark[clip]") from e
        try:
            self._model = CLIPModel.from_pretrained(model_id)
            self._processor = CLIPProcessor.from_pretrained(model_id)
        except Exception as e:
            raise BackendUnavailableError(f"cannot load encoder {model_id!r}: {e}") from e
        self._model.eval().to(device)
        self._device = device
        self.model_id = model_id
        self.embed_dim = int(self._model.config.projection_dim)
        self.deterministic = True
        ip = self._processor.image_processor
        self._mean = torch.tensor(ip.image_mean).view(1, 3, 1, 1)
        self._std = torch.tensor(ip.image_std).view(1, 3, 1, 1)
        self._size = ip.crop_size["height"]

    def embed_text(self, text: str) -> np.ndarray:
        if not text:
            raise GuidanceError("cannot embed empty text")
        tok = self._processor(text=[text], return_tensors="pt", padding=True)
        with torch.no_grad():
            feats = self._model.get_text_features(
                **{k: v.to(self._device) for k, v in tok.items()})
        return feats[0].cpu().numpy().astype(np.float32)

    def embed_images(self, images):
        batch, was_torch = _images_to_torch(images)
        chan = batch.permute(0, 3, 1, 2).float()
        if chan.shape[-1] != self._size:
            chan = torch.nn.functional.interpolate(
                chan, size=(self._size, self._size), mode="bicubic", align_corners=False)
        chan = (chan - self._mean) / self._std
        feats = self._model.get_image_features(pixel_values=chan.to(self._device))
        return feats if was_torch else feats.detach().cpu().numpy()


class RemoteBackend:
    """HTTP/JSON adapter for an out-of-process encoder.

    Contract: GET /info -> {embed_dim, model_id, deterministic};
    POST /embed_text {"texts": [...]} -> {"embeddings": [[...]]};
    POST /embed_images {"images": [n][H][W][3]} -> {"embeddings": [[...]]}.
    Forward-only: no gradients cross the wire.
    """

    def __init__(self, base_url: str, timeout: float = 60.0):
        import requests

        self._session = requests.Session()
        self._base = base_url.rstrip("/")
        self._timeout = timeout
        try:
            info = self._session.get(f"{self._base}/info", timeout=timeout).json()
        except Exception as e:
            raise BackendUnavailableError(f"remote backend unreachable at {base_url}: {e}") from e
        self.embed_dim = int(info["embed_dim"])
        self.model_id = str(info.get("model_id", base_url))
        self.deterministic = bool(info.get("deterministic", False))

    def _post(self, route: str, payload: dict) -> np.ndarray:
        import requests

        try:
            resp = self._session.post(f"{self._base}{route}", json=payload,
                                      timeout=self._timeout)
            resp.raise_for_status()
            return np.asarray(resp.json()["embeddings"], dtype=np.float32)
        except requests.RequestException as e:
            raise GuidanceError(f"remote backend call {route} failed: {e}") from e

    def embed_text(self, text: str) -> np.ndarray:
        if not text:
            raise GuidanceError("cannot embed empty text")
        return self._post("/embed_text", {"texts": [text]})[0]

    def embed_images(self, images):
        batch, _ = _images_to_torch(images)
        arr = batch.detach().cpu().numpy().astype(np.float64)
        return self._post("/embed_images", {"images": arr.tolist()})


# ---------------------------------------------------------------------------
# embedding ops


def embed_text(backend, text: str, cache: TextEmbeddingCache | None = None) -> np.ndarray:
    """Backend text embedding with content-hash caching."""
    if not text:
        raise GuidanceError("cannot embed empty text")
    if cache is not None:
        hit = cache.get(backend.model_id, text)
        if hit is not None:
            return hit
    vec = np.asarray(backend.embed_text(text))
    if vec.shape != (backend.embed_dim,):
        raise GuidanceError(f"backend returned embedding of shape {vec.shape}, "
                            f"expected ({backend.embed_dim},)")
    if not np.all(np.isfinite(vec)):
        raise GuidanceError("backend returned a non-finite text embedding")
    if cache is not None:
        cache.put(backend.model_id, text, vec)
    return vec


def aggregate_image_embedding(backend, images):
    """Mean of the per-image embeddings over all views."""
    batch, was_torch = _images_to_torch(images)
    if len(batch) == 0:
        raise GuidanceError("need at least one image to aggregate")
    emb = backend.embed_images(batch if was_torch else batch.numpy())
    if isinstance(emb, torch.Tensor):
        return emb.mean(dim=0)
    return np.asarray(emb).mean(axis=0)


def guidance_loss(e_i, e_t):
    """Negative cosine similarity between aggregate image and text embeddings."""
    if isinstance(e_i, torch.Tensor):
        t = e_t if isinstance(e_t, torch.Tensor) else torch.from_numpy(
            np.asarray(e_t, dtype=np.float64)).to(e_i.dtype)
        ni = e_i.norm()
        nt = t.norm()
        if float(ni.detach()) == 0.0 or float(nt.detach()) == 0.0:
            raise GuidanceError("guidance loss needs nonzero embeddings")
        return -(e_i * t).sum() / (ni * nt)
    a = np.asarray(e_i, dtype=np.float64)
    b = np.asarray(e_t, dtype=np.float64)
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise GuidanceError("guidance loss needs nonzero embeddings")
    return float(-(a @ b) / (na * nb))


def cosine_similarity_matrix(image_embeddings, text_embeddings) -> np.ndarray:
    a = np.asarray(image_embeddings, dtype=np.float64)
    b = np.asarray(text_embeddings, dtype=np.float64)
    a = a / np.linalg.norm(a, axis=1, keepdims=True)
    b = b / np.linalg.norm(b, axis=1, keepdims=True)
    return a @ b.T


# ---------------------------------------------------------------------------
# mock guidance oracle


@dataclass(frozen=True)
class AugSpec:
    seed: int
    distortion_scale: float


class MockGuidance:
    """Ground-truth-mask oracle replacing the encoder at desk scale.

    The loss is the negative mean highlight-channel agreement between renders
    of the candidate coloring and renders of the ground-truth coloring from
    the same views; it bottoms out exactly when the candidate probabilities
    match the mask on visible vertices.
    """

    model_id = "mock"
    deterministic = True

    def __init__(self, mesh: Mesh, target_mask: np.ndarray, render_cfg: RenderConfig):
        self.mesh = mesh
        self.target_mask = np.asarray(target_mask, dtype=bool)
        if len(self.target_mask) != mesh.num_vertices:
            raise GuidanceError("target mask length must equal vertex count")
        self.render_cfg = render_cfg
        self._gt_colors = torch.from_numpy(
            blend_colors(self.target_mask.astype(np.float64), render_cfg))
        h = np.asarray(render_cfg.highlight_color)
        g = np.asarray(render_cfg.base_color)
        axis = h - g
        self._axis = torch.from_numpy(axis / np.dot(axis, axis) ** 0.5)

    def loss_images(self, images: torch.Tensor, rmaps, aug_specs=None) -> torch.Tensor:
        if len(images) != len(rmaps):
            raise GuidanceError("one rastermap per image required")
        total = None
        for i, (img, rmap) in enumerate(zip(images, rmaps)):
            gt = shade_image(rmap, self._gt_colors.to(img.dtype), self.render_cfg)
            if aug_specs is not None and aug_specs[i] is not None:
                spec = aug_specs[i]
                gt = augment_perspective(gt, spec.distortion_scale, spec.seed,
                                         self.render_cfg.background)
            proj = ((img - gt) * self._axis.to(img.dtype)).sum(dim=-1)
            agreement = 1.0 - proj ** 2
            term = -agreement.mean()
            total = term if total is None else total + term
        return total / len(rmaps)

    def view_similarity(self, rmap) -> float:
        """Fraction of the image area showing ground-truth-highlighted surface."""
        if len(rmap.rows) == 0:
            return 0.0
        mass = rmap.interpolate(self.target_mask.astype(np.float64)).sum()
        return float(mass / (rmap.height * rmap.width))


# ---------------------------------------------------------------------------
# primary-view selection


def candidate_cameras(radius: float = 2.5, fov_deg: float = 60.0,
                      n_azimuths: int = 16,
                      elevations=(0.0, np.pi / 6)) -> list[Camera]:
    """Default candidate ring for view selection: azimuth sweep at two heights."""
    cams = []
    for elev in elevations:
        for k in range(n_azimuths):
            cams.append(Camera(2 * np.pi * k / n_azimuths, float(elev), radius, fov_deg))
    return cams


def select_primary_view(m: Mesh, field: HighlighterField, spec: PromptSpec,
                        backend, candidates, render_cfg: RenderConfig,
                        cache: TextEmbeddingCache | None = None) -> Camera:
    """Pick the candidate whose render scores highest against the prompt.

    Renders use the field's current blend state. Ties break to the lowest
    candidate index.
    """
    candidates = list(candidates)
    if not candidates:
        raise GuidanceError("need at least one candidate camera")
    if hasattr(backend, "view_similarity"):
        sims = [backend.view_similarity(
            rasterize(m, cam, render_cfg.image_size, render_cfg.lighting))
            for cam in candidates]
    else:
        probs = evaluate_highlight(field, m.vertices)
        colors = blend_colors(probs, render_cfg)
        with torch.no_grad():
            images = render_views(m, colors, candidates, render_cfg)
            emb = backend.embed_images(images)
        emb = emb.detach().numpy() if isinstance(emb, torch.Tensor) else np.asarray(emb)
        text = embed_text(backend, build_prompt(spec), cache)
        sims = cosine_similarity_matrix(emb, text[None, :])[:, 0].tolist()
    return candidates[int(np.argmax(sims))]
