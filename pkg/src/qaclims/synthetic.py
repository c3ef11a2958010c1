"""Synthetic shape scenes with ground-truth masks and VQA descriptors.

Each image holds one or two class objects drawn over a flat-colored
background. Every class has a co-occurring "prop" (a distractor object
placed against it) and a preferred background, so an image classifier can
lean on context; the scene descriptor records the true names of props,
backgrounds, object variants and aliases for the mock VQA backend.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datasets import DatasetManifest, ManifestItem
from .raster import image_digest, save_image, save_mask


@dataclass(frozen=True)
class ClassSpec:
    name: str
    variants: dict  # variant name -> RGB
    aliases: tuple
    prop: str
    background: str


PROPS = {
    "sofa": (1.0, 0.0, 0.5),
    "buoy": (1.0, 1.0, 0.0),
    "track": (0.75, 0.75, 0.75),
}

BACKGROUNDS = {
    "brick": ((0.85, 0.0, 0.0), ("brick", "wall", "bricks")),
    "sea": ((0.0, 0.45, 1.0), ("sea", "ocean", "water")),
    "grass": ((0.45, 1.0, 0.0), ("grass", "meadow", "lawn")),
}

_BASE_CLASSES = [
    ClassSpec("cat", {"tabby": (1.0, 0.47, 0.0), "ginger": (1.0, 0.33, 0.0)},
              ("kitty", "feline", "kitten", "pussycat"), "sofa", "brick"),
    ClassSpec("boat", {"sailing": (0.52, 0.0, 1.0), "fishing": (0.38, 0.0, 1.0)},
              ("ship", "vessel", "dinghy", "craft"), "buoy", "sea"),
    ClassSpec("train", {"passenger": (0.0, 1.0, 0.52), "freight": (0.0, 1.0, 0.38)},
              ("locomotive", "railcar", "tram", "metro"), "track", "grass"),
]

_EXTRA_NAMES = ["dog", "bird", "car", "cow", "horse", "sheep", "bus", "bottle", "chair",
                "person", "plant", "bike", "plane"]

SHAPES = ("circle", "square", "triangle", "diamond")


def class_specs(n_classes):
    """Specs for ``n_classes`` foreground classes (2..16)."""
    if not 2 <= n_classes <= 16:
        raise ValueError("n_classes must lie in [2, 16]")
    specs = list(_BASE_CLASSES[:n_classes])
    props, bgs = list(PROPS), list(BACKGROUNDS)
    for i in range(n_classes - len(specs)):
        # Extra classes sit on a second, desaturated hue ring; they may crowd the palette.
        h = 2 * np.pi * (i + 0.5) / max(1, n_classes - 3)
        rgb = tuple(float(v) for v in 0.55 + 0.45 * np.cos(h - np.array([0.0, 2.1, 4.2])))
        name = _EXTRA_NAMES[i]
        specs.append(ClassSpec(name, {f"mini{name}": rgb},
                               (f"{name}s",), props[i % 3], bgs[i % 3]))
    return specs


def concept_lexicon(specs):
    """Token -> list of RGB colors, for aligning mock text embeddings with image content."""
    lex = {}

    def add(token, colors):
        lex.setdefault(token, [])
        for c in colors:
            if c not in lex[token]:
                lex[token].append(c)

    for s in specs:
        cols = list(s.variants.values())
        add(s.name, cols)
        for a in s.aliases:
            add(a, cols)
        for v, c in s.variants.items():
            add(v, [c])
    for name, c in PROPS.items():
        add(name, [c])
    for name, (c, syns) in BACKGROUNDS.items():
        for t in syns:
            add(t, [c])
    return lex


@dataclass
class PlacedShape:
    kind: str
    class_id: int
    center: tuple
    radius: int
    color: tuple
    name: str = ""

    def support(self, h, w):
        yy, xx = np.mgrid[0:h, 0:w]
        cy, cx = self.center
        dy, dx = yy - cy, xx - cx
        r = self.radius
        if self.kind == "circle":
            return dy * dy + dx * dx <= r * r
        if self.kind == "square":
            return (np.abs(dy) <= r * 0.85) & (np.abs(dx) <= r * 0.85)
        if self.kind == "diamond":
            return np.abs(dy) + np.abs(dx) <= r
        if self.kind == "triangle":
            return (dy <= r * 0.8) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.6)
        if self.kind == "bar":
            return (np.abs(dy) <= r // 3) & (np.abs(dx) <= r)
        raise ValueError(self.kind)


@dataclass
class SyntheticScene:
    size: int
    background: str
    shapes: list = field(default_factory=list)  # class objects
    props: list = field(default_factory=list)
    variants: dict = field(default_factory=dict)  # class label -> variant name

    def render(self, rng, specs, noise=0.03):
        h = w = self.size
        bg_rgb = np.asarray(BACKGROUNDS[self.background][0])
        shade = rng.uniform(0.6, 0.9)
        stripes = 1.0 + 0.08 * np.sin(np.arange(w) * rng.uniform(0.3, 0.9))[None, :, None]
        img = np.broadcast_to(bg_rgb * shade, (h, w, 3)) * stripes
        mask = np.zeros((h, w), dtype=np.int64)
        for shp in self.props + self.shapes:
            sup = shp.support(h, w)
            img = np.where(sup[..., None], np.asarray(shp.color) * rng.uniform(0.7, 1.0), img)
            if shp.class_id > 0:
                mask[sup] = shp.class_id
        img = img + rng.normal(0.0, noise, img.shape)
        return np.clip(img, 0.0, 1.0).astype(np.float32), mask

    def descriptor(self, specs):
        labels = {s.class_id: specs[s.class_id - 1].name for s in self.shapes}
        bg_syns = list(BACKGROUNDS[self.background][1])
        prop_names = []
        for p in self.props:
            if p.name not in prop_names:
                prop_names.append(p.name)
        surrounding = {}
        for cid, label in labels.items():
            others = [l for c, l in labels.items() if c != cid]
            own = specs[cid - 1].prop
            near = [own] if own in prop_names else []
            surrounding[label] = near + [p for p in prop_names if p not in near] + others + [self.background]
        return {
            "background": self.background,
            "objects": [
                {"class_id": s.class_id, "label": labels[s.class_id], "shape": s.kind,
                 "variant": self.variants[labels[s.class_id]], "center": list(s.center), "radius": s.radius}
                for s in self.shapes
            ],
            "props": prop_names,
            "surrounding_object": surrounding,
            "scene": bg_syns,
            "fine_grained": {l: [self.variants[l]] for l in labels.values()},
            "alias": {l: list(specs[c - 1].aliases) for c, l in labels.items()},
        }


def _sample_scene(rng, specs, size, p_two=0.3, p_prop=0.8, p_pref_bg=0.35, p_stray_prop=0.15):
    k = len(specs)
    n_obj = 2 if rng.random() < p_two else 1
    cids = sorted(int(c) + 1 for c in rng.choice(k, size=n_obj, replace=False))
    first = specs[cids[0] - 1]
    bg = first.background if rng.random() < p_pref_bg else list(BACKGROUNDS)[rng.integers(len(BACKGROUNDS))]
    scene = SyntheticScene(size, bg)
    occupied = np.zeros((size, size), dtype=bool)
    for cid in cids:
        spec = specs[cid - 1]
        vname = list(spec.variants)[rng.integers(len(spec.variants))]
        for _ in range(200):
            r = int(rng.integers(size // 7, size // 4 + 1))
            cy = int(rng.integers(r + 1, size - r - size // 8))
            cx = int(rng.integers(r + 1, size - r - 1))
            shp = PlacedShape(SHAPES[rng.integers(len(SHAPES))], cid, (cy, cx), r, spec.variants[vname], spec.name)
            sup = shp.support(size, size)
            if not (sup & occupied).any():
                break
        occupied |= sup
        scene.shapes.append(shp)
        scene.variants[spec.name] = vname
        if rng.random() < p_prop:
            # Prop sits right under the object, touching it.
            pr = int(r + rng.integers(2, 6))
            py = min(size - 2, cy + r + pr // 3)
            scene.props.append(PlacedShape("bar", 0, (py, cx), pr, PROPS[spec.prop], spec.prop))
    if rng.random() < p_stray_prop:
        name = list(PROPS)[rng.integers(len(PROPS))]
        r = int(rng.integers(size // 8, size // 5))
        scene.props.append(PlacedShape("bar", 0, (int(rng.integers(r, size - r)), int(rng.integers(r, size - r))),
                                       r, PROPS[name], name))
    return scene


def generate_synthetic(n_images, n_classes, seed, out_dir, size=64, n_eval=0):
    """Write images, index masks, scene descriptors and a manifest under ``out_dir``.

    The last ``n_eval`` images are tagged as the evaluation split. Output is
    a pure function of the arguments.
    """
    if n_images < 1:
        raise ValueError("n_images must be at least 1")
    if not 0 <= n_eval <= n_images:
        raise ValueError("n_eval must lie in [0, n_images]")
    specs = class_specs(n_classes)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    items, scenes = [], {}
    for i in range(n_images):
        scene = _sample_scene(rng, specs, size)
        img, mask = scene.render(rng, specs)
        image_id = f"syn_{i:05d}"
        save_image(img, out / "images" / f"{image_id}.png")
        save_mask(mask, out / "masks" / f"{image_id}.png")
        labels = sorted(int(c) for c in np.unique(mask) if c != 0)
        desc = scene.descriptor(specs)
        desc["digest"] = image_digest(img)
        desc["split"] = "eval" if i >= n_images - n_eval else "train"
        scenes[image_id] = desc
        items.append(ManifestItem(image_id, f"images/{image_id}.png", labels, f"masks/{image_id}.png"))
    (out / "scenes.json").write_text(json.dumps(scenes, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    manifest = DatasetManifest(["background"] + [s.name for s in specs], items, root=str(out), scenes="scenes.json")
    manifest.save(out / "manifest.json")
    return manifest


def load_scenes(manifest: DatasetManifest):
    """Scene descriptors keyed by image id (empty if the manifest has none)."""
    if not manifest.scenes:
        return {}
    return json.loads(Path(manifest.resolve(manifest.scenes)).read_text(encoding="utf-8"))


def vqa_scenes(manifest: DatasetManifest):
    """Descriptors keyed by image digest, in the shape :class:`MockVqaBackend` expects.

    ``surrounding_object`` is stored per class label in the scene file;
    the backend indexes it by the label parsed from the question.
    """
    return {d["digest"]: d for d in load_scenes(manifest).values()}


def split_ids(manifest: DatasetManifest, split):
    scenes = load_scenes(manifest)
    return [it.image_id for it in manifest.items if scenes.get(it.image_id, {}).get("split", "train") == split]


def lexicon_for(manifest: DatasetManifest):
    return concept_lexicon(class_specs(len(manifest.classes) - 1))
