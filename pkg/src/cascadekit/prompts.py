"""Prompt rendering and response parsing for the refinement stage.

Bundles are backend-neutral: an ordered list of messages whose parts
interleave text segments with opaque image references. Rendering is a pure
function of its inputs, so identical candidates, exemplars, and template
always produce byte-identical bundles (and therefore stable prompt digests
for record/replay).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .core import CandidateSet, LabelSet, normalize_label
from .errors import ValidationError

ZERO_SHOT_TEMPLATES = ("prompt1", "prompt2")
FEW_SHOT_TEMPLATES = ("fewshot",)
EXPLANATION_TEMPLATE = "explain"

PARSE_POLICIES = ("exact", "normalized", "normalized_then_substring")

PARSE_MATCHED = "matched"
PARSE_FALLBACK_TOP1 = "fallback_top1"


@dataclass(frozen=True)
class TextPart:
    text: str


@dataclass(frozen=True)
class ImagePart:
    ref: str


Part = TextPart | ImagePart


@dataclass(frozen=True)
class Message:
    role: str
    parts: tuple[Part, ...]


@dataclass(frozen=True)
class PromptBundle:
    """A rendered prompt plus the metadata its digest is derived from.

    Invariants: the candidate labels appear verbatim, comma-separated,
    inside exactly one "Options: [...]" text segment; image parts are the
    exemplar references (in rendered order) followed by the query image.
    """

    messages: tuple[Message, ...]
    candidate_labels: tuple[str, ...]
    template_id: str
    item_image_ref: str
    exemplar_refs: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        option_segments = [
            part.text
            for message in self.messages
            for part in message.parts
            if isinstance(part, TextPart) and "Options: [" in part.text
        ]
        if len(option_segments) != 1:
            raise ValidationError(
                f"bundle must contain exactly one Options segment, found {len(option_segments)}"
            )
        rendered = f"Options: [{', '.join(self.candidate_labels)}]"
        if rendered not in option_segments[0]:
            raise ValidationError("Options segment does not list the candidate labels verbatim")
        image_refs = tuple(
            part.ref
            for message in self.messages
            for part in message.parts
            if isinstance(part, ImagePart)
        )
        if image_refs != self.exemplar_refs + (self.item_image_ref,):
            raise ValidationError("image parts must be the exemplar refs followed by the query image")

    def text_segments(self) -> tuple[str, ...]:
        return tuple(
            part.text
            for message in self.messages
            for part in message.parts
            if isinstance(part, TextPart)
        )


@dataclass(frozen=True)
class ExemplarBank:
    """Selected exemplar references per label for few-shot contexts."""

    refs_by_label: Mapping[str, tuple[str, ...]]
    seed: int = 0
    shots_per_class: int = 0

    def refs_for(self, label: str) -> tuple[str, ...]:
        try:
            return tuple(self.refs_by_label[label])
        except KeyError:
            raise ValidationError(f"exemplar bank has no entry for label {label!r}") from None


def _options_text(candidate_labels: Sequence[str]) -> str:
    return f"Options: [{', '.join(candidate_labels)}]"


def _question(subject: str, candidate_labels: Sequence[str]) -> str:
    return (
        f"Question: What is the {subject} name? Remember select only one {subject} name "
        f"from the options and response with the {subject} name only. "
        f"{_options_text(candidate_labels)}"
    )


def _zero_shot_text(template_id: str, subject: str, candidate_labels: Sequence[str]) -> str:
    if template_id == "prompt2":
        return _question(subject, candidate_labels)
    if template_id == "prompt1":
        # Wordier instruction style; kept selectable because it parses worse
        # with option-list-trained chat models.
        return (
            f"Please examine the image and identify the most suitable {subject} name "
            f"corresponding to the image content from the options below. Remember select "
            f"only one {subject} name, and response with the {subject} name ONLY. "
            f"{_options_text(candidate_labels)}"
        )
    raise ValidationError(f"unknown zero-shot template {template_id!r}; expected one of {ZERO_SHOT_TEMPLATES}")


def render_zero_shot(
    candidate_labels: Sequence[str],
    item_image_ref: str,
    template_id: str = "prompt2",
    subject: str = "class",
) -> PromptBundle:
    """Render a single-turn option-constrained classification prompt.

    ``candidate_labels`` must already be in presentation order; the rendered
    Options list preserves it verbatim.
    """
    if not candidate_labels:
        raise ValidationError("cannot render a prompt with no candidates")
    text = _zero_shot_text(template_id, subject, candidate_labels)
    message = Message(role="user", parts=(ImagePart(ref=item_image_ref), TextPart(text=text)))
    return PromptBundle(
        messages=(message,),
        candidate_labels=tuple(candidate_labels),
        template_id=template_id,
        item_image_ref=item_image_ref,
    )


def render_few_shot(
    candidate_labels: Sequence[str],
    exemplars: ExemplarBank,
    item_image_ref: str,
    template_id: str = "fewshot",
    subject: str = "class",
) -> PromptBundle:
    """Render an in-context prompt: one labelled exemplar block per candidate
    (per shot), then the query image with the Options list.

    Exemplar blocks carry the question and "Answer: <label>" but no Options;
    only the final query segment lists the options. Raises if the bank lacks
    exemplars for any candidate.
    """
    if not candidate_labels:
        raise ValidationError("cannot render a prompt with no candidates")
    if template_id not in FEW_SHOT_TEMPLATES:
        raise ValidationError(f"unknown few-shot template {template_id!r}; expected one of {FEW_SHOT_TEMPLATES}")
    parts: list[Part] = []
    exemplar_refs: list[str] = []
    for label in candidate_labels:
        refs = exemplars.refs_for(label)
        if not refs:
            raise ValidationError(f"exemplar bank has no exemplars for label {label!r}")
        for ref in refs:
            parts.append(ImagePart(ref=ref))
            parts.append(TextPart(text=f"Question: What is the {subject} name? Answer: {label}"))
            exemplar_refs.append(ref)
    parts.append(ImagePart(ref=item_image_ref))
    parts.append(TextPart(text=f"{_question(subject, candidate_labels)} Answer:"))
    message = Message(role="user", parts=tuple(parts))
    return PromptBundle(
        messages=(message,),
        candidate_labels=tuple(candidate_labels),
        template_id=template_id,
        item_image_ref=item_image_ref,
        exemplar_refs=tuple(exemplar_refs),
    )


def render_explanation(
    candidate_labels: Sequence[str],
    item_image_ref: str,
    subject: str = "class",
) -> PromptBundle:
    """Zero-shot prompt that additionally asks the refiner to justify why the
    chosen option is preferred over the others."""
    if not candidate_labels:
        raise ValidationError("cannot render a prompt with no candidates")
    text = (
        f"{_question(subject, candidate_labels)} "
        f"Then explain why the selected option fits the image better than the other options."
    )
    message = Message(role="user", parts=(ImagePart(ref=item_image_ref), TextPart(text=text)))
    return PromptBundle(
        messages=(message,),
        candidate_labels=tuple(candidate_labels),
        template_id=EXPLANATION_TEMPLATE,
        item_image_ref=item_image_ref,
    )


def prompt_digest(bundle: PromptBundle) -> str:
    """Stable hex digest covering everything that shapes the prompt.

    Any change to template, candidate list (content or order), query image,
    or exemplar choice yields a new digest, which is what invalidates stale
    replay recordings.
    """
    payload = json.dumps(
        {
            "template_id": bundle.template_id,
            "candidate_labels": list(bundle.candidate_labels),
            "item_image_ref": bundle.item_image_ref,
            "exemplar_refs": list(bundle.exemplar_refs),
        },
        sort_keys=True,
        separators=(",", ":"),
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def parse_response(
    text: str,
    candidates: CandidateSet,
    labels: LabelSet,
    policy: str = "normalized_then_substring",
) -> tuple[int, str]:
    """Map refiner output text back into the candidate space.

    Policies:
      * ``exact`` — verbatim string equality against candidate labels.
      * ``normalized`` — equality after canonical normalization (case fold,
        trim, terminal punctuation strip, whitespace collapse).
      * ``normalized_then_substring`` — normalized equality first, then a
        unique candidate whose normalized form occurs inside the normalized
        response; ambiguous substring hits fall back.

    Total function: anything unmatched returns the highest-probability
    candidate with outcome ``fallback_top1``, so the prediction never leaves
    the candidate set.
    """
    if policy not in PARSE_POLICIES:
        raise ValidationError(f"unknown parse policy {policy!r}; expected one of {PARSE_POLICIES}")
    candidate_labels = candidates.label_strings(labels)

    if policy == "exact":
        for index, label in zip(candidates.indices, candidate_labels):
            if text == label:
                return index, PARSE_MATCHED
        return candidates.indices[0], PARSE_FALLBACK_TOP1

    normalized = normalize_label(text)
    for index, label in zip(candidates.indices, candidate_labels):
        if normalized == normalize_label(label):
            return index, PARSE_MATCHED
    if policy == "normalized_then_substring" and normalized:
        hits = [
            index
            for index, label in zip(candidates.indices, candidate_labels)
            if normalize_label(label) in normalized
        ]
        if len(hits) == 1:
            return hits[0], PARSE_MATCHED
    return candidates.indices[0], PARSE_FALLBACK_TOP1
