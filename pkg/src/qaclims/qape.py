"""Question-answer prompt engineering: per-image foreground/background corpora.

Question templates are filled with a class label and posed to a VQA
backend together with the image. The raw answers are cleaned into
``"a photo of ..."`` prompts: foreground answers get the class label
appended when they do not already name it, background answers are
dropped when empty or identical to the label.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import logging
import re
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Protocol

from .raster import image_digest, to_uint8

log = logging.getLogger(__name__)

PLACEHOLDER = "{class}"
BG_KINDS = ("surrounding_object", "scene")
FG_KINDS = ("fine_grained", "alias")
KINDS = BG_KINDS + FG_KINDS
LABEL_KIND = "label"
BASELINE_KIND = "no_class"
PROMPT_PREFIX = "a photo of "
CORPUS_SCHEMA = "qaclims.corpus/1"


class TemplateError(ValueError):
    pass


class CorpusFormatError(ValueError):
    pass


class CorpusVersionError(CorpusFormatError):
    pass


@dataclass(frozen=True)
class QuestionTemplate:
    kind: str
    pattern: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise TemplateError(f"unknown template kind {self.kind!r}")
        n = self.pattern.count(PLACEHOLDER)
        if n != 1:
            raise TemplateError(
                f"template {self.pattern!r} must contain exactly one {PLACEHOLDER}, found {n}"
            )


@dataclass(frozen=True)
class TemplateSet:
    version: str
    templates: tuple[QuestionTemplate, ...]

    def of_kind(self, *kinds):
        return [t for t in self.templates if t.kind in kinds]

    @property
    def bg(self):
        return self.of_kind(*BG_KINDS)

    @property
    def fg(self):
        return self.of_kind(*FG_KINDS)


def load_templates(path=None) -> TemplateSet:
    """Load a template file; ``None`` loads the shipped default set."""
    if path is None:
        text = resources.files("qaclims").joinpath("data/templates.json").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    try:
        doc = json.loads(text)
        templates = tuple(QuestionTemplate(t["kind"], t["pattern"]) for t in doc["templates"])
        version = str(doc["version"])
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise TemplateError(f"malformed template file: {exc}") from exc
    if not templates:
        raise TemplateError("template file lists no templates")
    return TemplateSet(version, templates)


def fill_template(template, class_label: str) -> str:
    """Substitute ``class_label`` into the single ``{class}`` slot of ``template``.

    ``template`` may be a :class:`QuestionTemplate` or a bare pattern string.
    """
    pattern = template.pattern if isinstance(template, QuestionTemplate) else template
    if not class_label:
        raise ValueError("class label must be non-empty")
    n = pattern.count(PLACEHOLDER)
    if n != 1:
        raise TemplateError(f"template {pattern!r} must contain exactly one {PLACEHOLDER}, found {n}")
    return pattern.replace(PLACEHOLDER, class_label)


# --- VQA backends ----------------------------------------------------------


class VqaBackend(Protocol):
    backend_id: str

    def answer(self, image, question: str) -> str: ...


_FALLBACK_VOCAB = {
    "surrounding_object": ["table", "chair", "tree", "wall", "grass", "road", "window", "water"],
    "scene": ["kitchen", "street", "park", "beach", "living room", "field", "forest", "office"],
    "fine_grained": ["small", "large", "white", "black", "old", "wild", "young", "red"],
    "alias": ["object", "thing", "item", "animal", "vehicle", "creature", "device", "figure"],
}


def _stable_index(*parts, modulo):
    h = hashlib.sha256("\x1f".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "big") % modulo


class MockVqaBackend:
    """Deterministic stand-in for a VQA model.

    Questions are parsed back into (kind, class label) through the template
    set. For images registered in ``scenes`` (keyed by :func:`image_digest`)
    the answer is read from the scene descriptor, which maps each kind to a
    list of answers (``fine_grained`` and ``alias`` map class label to list).
    Other images get a token hashed from the image digest, kind and label.
    """

    backend_id = "mock-v1"

    def __init__(self, templates: TemplateSet | None = None, scenes=None):
        self.templates = templates or load_templates()
        self.scenes = dict(scenes or {})
        self._parsers = []
        counters = {}
        for t in self.templates.templates:
            pre, post = t.pattern.split(PLACEHOLDER)
            idx = counters.get(t.kind, 0)
            counters[t.kind] = idx + 1
            rx = re.compile(re.escape(pre) + "(.+)" + re.escape(post) + r"\Z")
            self._parsers.append((rx, t.kind, idx))

    def parse(self, question):
        for rx, kind, idx in self._parsers:
            m = rx.match(question)
            if m:
                return kind, m.group(1), idx
        return None

    def answer(self, image, question):
        parsed = self.parse(question)
        if parsed is None:
            return ""
        kind, label, idx = parsed
        digest = image_digest(image)
        scene = self.scenes.get(digest)
        if scene is not None:
            opts = scene.get(kind, [])
            if isinstance(opts, dict):
                opts = opts.get(label, [])
            return opts[idx % len(opts)] if opts else ""
        vocab = _FALLBACK_VOCAB[kind]
        return vocab[_stable_index(digest, kind, label, idx, modulo=len(vocab))]


class ExternalVqaBackend:
    """HTTP adapter: POST ``{"image": <base64 PNG>, "question": str}`` to ``url``.

    The endpoint replies ``{"answer": str}``.
    """

    def __init__(self, url, timeout=30.0):
        self.url = url
        self.timeout = timeout
        self.backend_id = f"external:{url}"

    def answer(self, image, question):
        from PIL import Image

        buf = io.BytesIO()
        Image.fromarray(to_uint8(image)).save(buf, format="PNG")
        body = json.dumps(
            {"image": base64.b64encode(buf.getvalue()).decode("ascii"), "question": question}
        ).encode("utf-8")
        req = urllib.request.Request(
            self.url, data=body, headers={"Content-Type": "application/json"}, method="POST"
        )
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            return str(json.loads(resp.read().decode("utf-8"))["answer"])


class CachedVqaBackend:
    """Memoize answers by (image digest, question text)."""

    def __init__(self, inner):
        self.inner = inner
        self.backend_id = inner.backend_id
        self.cache = {}
        self.misses = 0

    def answer(self, image, question):
        key = (image_digest(image), question)
        if key not in self.cache:
            self.misses += 1
            self.cache[key] = self.inner.answer(image, question)
        return self.cache[key]


def ask_all(backend, image, class_label, templates, max_workers=1):
    """Pose every template (filled with ``class_label``) to ``backend``.

    Returns ``{kind: [answer, ...]}`` in template order. A question whose
    backend call raises is recorded as an empty answer.
    """
    templates = list(templates)
    if not templates:
        raise ValueError("no templates given")
    questions = [fill_template(t, class_label) for t in templates]

    def one(q):
        try:
            ans = backend.answer(image, q)
        except Exception as exc:  # noqa: BLE001 - any backend failure becomes an empty answer
            log.warning("VQA backend failed on %r: %s", q, exc)
            return ""
        return (ans or "").strip()

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            answers = list(pool.map(one, questions))
    else:
        answers = [one(q) for q in questions]
    grouped = {}
    for t, a in zip(templates, answers):
        grouped.setdefault(t.kind, []).append(a)
    return grouped


# --- post-processing ---------------------------------------------------------


def _prompt(text):
    return PROMPT_PREFIX + text


def _names_label(answer, class_label):
    words = re.findall(r"[a-z0-9]+", answer.lower())
    label_words = re.findall(r"[a-z0-9]+", class_label.lower())
    n = len(label_words)
    return n > 0 and any(words[i : i + n] == label_words for i in range(len(words) - n + 1))


def _dedup(items):
    seen = set()
    out = []
    for it in items:
        if it not in seen:
            seen.add(it)
            out.append(it)
    return out


def postprocess_fg(raw_answers, class_label, dedup=False, with_kinds=False):
    """Turn raw foreground answers into L+1 (at most) prompts.

    Answers that do not already name the class get it appended
    (``"passenger"`` becomes ``"passenger train"``); the bare label is
    always added last.
    """
    texts, kinds = [], []
    raw = raw_answers.items() if isinstance(raw_answers, dict) else [(None, raw_answers)]
    for kind, answers in raw:
        for a in answers:
            a = (a or "").strip()
            if not a:
                continue
            if not _names_label(a, class_label):
                a = f"{a} {class_label}"
            texts.append(_prompt(a))
            kinds.append(kind)
    texts.append(_prompt(class_label))
    kinds.append(LABEL_KIND)
    if dedup:
        keep = _dedup(texts)
        kinds = [kinds[texts.index(t)] for t in keep]
        texts = keep
    return (texts, kinds) if with_kinds else texts


def postprocess_bg(raw_answers, class_label, dedup=False, with_kinds=False, exclude=()):
    """Wrap surviving background answers as prompts.

    Empty answers and answers equal to the class label are dropped, as are
    prompts listed in ``exclude`` (the foreground prompts). If nothing
    survives, the single ``"a photo of no {class}"`` prompt is returned.
    """
    texts, kinds = [], []
    raw = raw_answers.items() if isinstance(raw_answers, dict) else [(None, raw_answers)]
    exclude = set(exclude)
    for kind, answers in raw:
        for a in answers:
            a = (a or "").strip()
            if not a or a.lower() == class_label.lower():
                continue
            p = _prompt(a)
            if p in exclude:
                continue
            texts.append(p)
            kinds.append(kind)
    if dedup:
        keep = _dedup(texts)
        kinds = [kinds[texts.index(t)] for t in keep]
        texts = keep
    if not texts:
        texts, kinds = [_prompt(f"no {class_label}")], [BASELINE_KIND]
    return (texts, kinds) if with_kinds else texts


# --- corpus records --------------------------------------------------------


@dataclass
class ClassCorpus:
    class_id: int
    class_label: str
    fg_texts: list
    bg_texts: list
    # Source kind of each text; lets ablations rebuild a corpus from a subset of question families.
    fg_kinds: list = field(default_factory=list)
    bg_kinds: list = field(default_factory=list)

    def __post_init__(self):
        if not self.fg_kinds:
            self.fg_kinds = [LABEL_KIND if t == _prompt(self.class_label) else "unknown" for t in self.fg_texts]
        if not self.bg_kinds:
            self.bg_kinds = ["unknown"] * len(self.bg_texts)
        if not self.fg_texts or not self.bg_texts:
            raise CorpusFormatError("a class corpus needs at least one FG and one BG text")
        if len(self.fg_kinds) != len(self.fg_texts) or len(self.bg_kinds) != len(self.bg_texts):
            raise CorpusFormatError("kind tags must parallel the texts")
        for t in self.fg_texts + self.bg_texts:
            if not t.startswith(PROMPT_PREFIX) or len(t) == len(PROMPT_PREFIX):
                raise CorpusFormatError(f"malformed prompt {t!r}")
        if set(self.bg_texts) & set(self.fg_texts):
            raise CorpusFormatError("a BG prompt duplicates a FG prompt")

    def restrict(self, kinds):
        """Keep only texts from the given question kinds (the bare label always stays)."""
        kinds = set(kinds)
        fg = [(t, k) for t, k in zip(self.fg_texts, self.fg_kinds) if k in kinds or k == LABEL_KIND]
        bg = [(t, k) for t, k in zip(self.bg_texts, self.bg_kinds) if k in kinds]
        if not bg:
            bg = [(_prompt(f"no {self.class_label}"), BASELINE_KIND)]
        return ClassCorpus(
            self.class_id,
            self.class_label,
            [t for t, _ in fg],
            [t for t, _ in bg],
            [k for _, k in fg],
            [k for _, k in bg],
        )


def build_baseline_corpus(class_label, class_id=0):
    """Label-only FG text and ``"no {class}"`` BG text."""
    if not class_label:
        raise ValueError("class label must be non-empty")
    return ClassCorpus(
        class_id,
        class_label,
        [_prompt(class_label)],
        [_prompt(f"no {class_label}")],
        [LABEL_KIND],
        [BASELINE_KIND],
    )


def build_class_corpus(grouped_answers, class_id, class_label, dedup=False):
    fg_raw = {k: grouped_answers.get(k, []) for k in FG_KINDS}
    bg_raw = {k: grouped_answers.get(k, []) for k in BG_KINDS}
    fg, fg_kinds = postprocess_fg(fg_raw, class_label, dedup=dedup, with_kinds=True)
    bg, bg_kinds = postprocess_bg(bg_raw, class_label, dedup=dedup, with_kinds=True, exclude=fg)
    return ClassCorpus(class_id, class_label, fg, bg, fg_kinds, bg_kinds)


@dataclass
class CorpusStore:
    records: dict = field(default_factory=dict)  # (image_id, class_id) -> ClassCorpus
    template_version: str = ""
    backend_id: str = ""

    def get(self, image_id, class_id):
        return self.records.get((image_id, int(class_id)))

    def __len__(self):
        return len(self.records)

    def variant(self, kinds):
        """A store whose corpora keep only the given question kinds; ``()`` gives the baseline."""
        return CorpusStore(
            {key: c.restrict(kinds) for key, c in self.records.items()},
            self.template_version,
            f"{self.backend_id}|kinds={','.join(sorted(kinds)) or 'none'}",
        )


def generate_corpus(items, class_names, backend, templates: TemplateSet | None = None,
                    max_workers=1, dedup=False):
    """Build a :class:`CorpusStore` for ``items``.

    ``items`` yields ``(image_id, image, label_ids)``; ``class_names[i]`` is
    the text label of class ``i``.
    """
    templates = templates or load_templates()
    store = CorpusStore(template_version=templates.version, backend_id=backend.backend_id)
    for image_id, image, labels in items:
        for cid in sorted(int(c) for c in labels):
            grouped = ask_all(backend, image, class_names[cid], templates.templates, max_workers)
            store.records[(image_id, cid)] = build_class_corpus(grouped, cid, class_names[cid], dedup)
    return store


def save_corpus(store: CorpusStore, path):
    """Write ``store`` as JSON lines: a header, then one record per (image, class)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps({
        "schema": CORPUS_SCHEMA,
        "template_version": store.template_version,
        "backend_id": store.backend_id,
    }, ensure_ascii=False)]
    for (image_id, cid) in sorted(store.records, key=lambda k: (str(k[0]), k[1])):
        c = store.records[(image_id, cid)]
        lines.append(json.dumps({
            "image_id": image_id,
            "class_id": c.class_id,
            "class_label": c.class_label,
            "fg_texts": c.fg_texts,
            "bg_texts": c.bg_texts,
            "fg_kinds": c.fg_kinds,
            "bg_kinds": c.bg_kinds,
            "template_version": store.template_version,
            "backend_id": store.backend_id,
        }, ensure_ascii=False))
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    tmp.replace(path)


def load_corpus(path) -> CorpusStore:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"corpus file not found: {path}")
    lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines:
        raise CorpusFormatError(f"{path}: empty corpus file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise CorpusFormatError(f"{path}:1: {exc}") from exc
    if header.get("schema") != CORPUS_SCHEMA:
        raise CorpusVersionError(f"{path}: expected schema {CORPUS_SCHEMA!r}, got {header.get('schema')!r}")
    store = CorpusStore(template_version=header["template_version"], backend_id=header["backend_id"])
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
            c = ClassCorpus(
                int(rec["class_id"]),
                rec["class_label"],
                list(rec["fg_texts"]),
                list(rec["bg_texts"]),
                list(rec.get("fg_kinds", [])),
                list(rec.get("bg_kinds", [])),
            )
            image_id = rec["image_id"]
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise CorpusFormatError(f"{path}:{lineno}: malformed record ({exc})") from exc
        if rec.get("template_version", store.template_version) != store.template_version:
            raise CorpusVersionError(f"{path}:{lineno}: template version differs from header")
        store.records[(image_id, c.class_id)] = c
    return store
