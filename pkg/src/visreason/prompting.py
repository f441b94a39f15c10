"""Prompt templates and their renderers.

Templates are stored in canonical form: source indentation removed, no
trailing whitespace on any line, exactly one final newline. The golden files
under ``tests/fixtures/prompts/v1`` define that canon; any change here must be
mirrored there.
"""

from __future__ import annotations

import hashlib
from collections.abc import Sequence
from enum import Enum
from pathlib import Path

from .domain import RuleSummary
from .errors import CountMismatch, EmptyField, EmptyRule, ParamError


class TemplateId(str, Enum):
    DVRL = "DVRL"
    DVRL_MINIMAL = "DVRL_MINIMAL"
    DRL_EXTRACT = "DRL_EXTRACT"
    DRL_APPLY = "DRL_APPLY"
    RULE_APPLY_ABLATION = "RULE_APPLY_ABLATION"  # same body as DRL_APPLY
    CA_DESCRIBE = "CA_DESCRIBE"
    CA_REASON = "CA_REASON"
    WG_CAPTION_CHOICE = "WG_CAPTION_CHOICE"
    WG_IMAGE_CHOICE = "WG_IMAGE_CHOICE"


_OUTPUT_FORMAT = """\
- **Analysis**: (Your analysis here)
- **Rule**: (The distinguishing rule here)
- **Query Image**: (Query image details)
- **Conclusion**: (cat_1 or cat_2)
"""

_DVRL_TASK = """\
You are provided with {total} images: the first {m} samples are `cat_2`, the next {n} samples are `cat_1`, and the last image is the `query image`.
Analyze the common characteristics or patterns found in the `cat_2` samples (positive samples: following 1 common rule) that distinctly separate them from the `cat_1` samples (negative samples: it might not follow any possible rule).
Your task is to:

1. Determine the rule or criterion that distinguishes the `cat_2` samples from the `cat_1` ones.
2. Analyse the `query image` (last image).
3. Provide your conclusion for the `query image` if it can be categorized as either `cat_1` or `cat_2` based on the analysis and the rule.
"""

DVRL_TEMPLATE = (
    _DVRL_TASK
    + """
Ensure that the output is clear, well-formatted, and free of unnecessary explanations.
Omit the ``` tags at the beginning and end of the page. The format of your output should be as follows:

"""
    + _OUTPUT_FORMAT
)

DVRL_MINIMAL_TEMPLATE = _DVRL_TASK

_DRL_EXTRACT_TAIL = """\
Your task is to provide the rules that defines cat_2 samples. At the end, write "summary" of the rule identified in less than 20 words.
Ensure that the output is clear, well-formatted, and free of unnecessary explanations. Omit the ``` tags at the beginning and end of the page.
"""

DRL_EXTRACT_TEMPLATE = (
    "You are provided with {total} images: the first {m} samples are cat_2, the next {n} samples are cat_1. "
    "Analyze the common characteristics or patterns found in the cat_2 samples (positive samples: following 1 "
    "common rule) that distinctly separate them from the cat_1 samples (negative samples: it might not follow "
    "any possible rule).\n" + _DRL_EXTRACT_TAIL
)

DRL_EXTRACT_POSITIVES_ONLY_TEMPLATE = (
    "You are provided with {m} images: {m} samples are cat_2. Analyze the common characteristics or patterns "
    "found in the cat_2 samples (positive samples: following 1 common rule) that distinctly separate them from "
    "negative samples which might not follow any possible rule.\n" + _DRL_EXTRACT_TAIL
)

DRL_APPLY_TEMPLATE = (
    "We are working with Bongard dataset where there are {m} image in the cat_2 and {n} images in the cat_1. "
    "Summary of the common characteristics or patterns found in the cat_2 samples (positive samples: following "
    "1 common rule) that distinctly separate them from the cat_1 samples (negative samples: it might not follow "
    "any possible rule) is as follows:\n"
    " {summary}.\n"
    "\n"
    'Your task is to ponder over the rule and provide your conclusion for the `query image` if it can be '
    'categorized as either "cat_1" or "cat_2".\n'
    "\n"
    "Ensure that the output is clear, well-formatted, and free of unnecessary explanations.\n"
    "Omit the ``` tags at the beginning and end of the page. The format of your output should be as follows:\n"
    "\n" + _OUTPUT_FORMAT
)

CA_DESCRIBE_TEMPLATE = """\
Carefully examine the provided image and identify all possible visual elements, organizing them into a detailed hierarchical structure. Start with broad categories and progress to more specific subcategories. This should cover everything visible in the image, ensuring no detail is overlooked. Structure your findings in a JSON format to enable easy comparison and synthesis of data from other images. This will help discern patterns, contexts, and rules valuable for identifying or understanding query images.

Your hierarchy might encompass the following elements:

1. **Scene/Environment**: Description of the overall setting depicted, such as urban, natural, indoor, or outdoor scenes.
2. **Objects**: Define distinct items or entities present in the scene.
- **Living Beings**: Animals, humans, or other biological entities.
    - Species or classification (e.g., dog, bird, human).
    - Characteristics (e.g., color, posture, movement).
- **Inanimate Objects**: Both synthetic and natural elements.
    - Categories (e.g., vehicle, building, trees).
    - Properties (e.g., color, size, material, shape).
3. **Activities**: Observable actions or interactions involving any objects or beings.
- Specific descriptions of actions (e.g., walking, flying).
- Participants involved in these actions.
4. **Contextual Elements**: Environmental conditions and time markers, such as time of day or weather.
- Detailed characteristics (e.g., cloudy, night, winter).
5. **Visual Patterns**: Prominent colors, textures, and patterns that are visually significant.
6. **Emotional Undertones**: Any emotional presence or expressions evident in the image.
7. **Textual Information**: Any visible text within the image, including what it says and its visual style.
8. **Summary**: A concise narrative summarizing the overall content and context of the image.

Ensure that every aspect from the image is represented under these categories. The information should be presented in the following JSON format:

{
"Scene": {
    "Description": "..."
},
"Objects": {
    "Living Beings": [...],
    "Inanimate Objects": [...]
},
"Activities": [...],
"Contextual Elements": {
    "Time of Day": "...",
    "Weather": "..."
},
"Visual Patterns": {
    "Dominant Colors": [...],
    "Textures": [...]
},
"Emotional Undertones": "..."
"Textual Information": "..."
"Summary": "..."
}
Ensure that the JSON output is clear, well-formatted, and free of unnecessary explanations. Omit the ```json tags at the beginning and end of the page.
"""

CA_REASON_TEMPLATE = """\
We are working with the Bongard dataset, which contains {m} images in cat_2 (positive samples) and {n} images in cat_1 (negative samples). These categories are defined as follows:
- Cat_2: Positive samples that follow a single common rule.
- Cat_1: Negative samples that may not follow any specific rule.

The image descriptions for the positive samples, negative samples, and the test image are provided in JSON format. Analyze the common patterns or characteristics in the cat_2 samples that distinguish them from cat_1 samples.

Your task is to:
1. Derive the rule that defines the cat_2 samples.
2. Apply this rule to categorize the test image.

Here are the image descriptions:

### Positive Samples (cat_2):
{positives}

### Negative Samples (cat_1):
{negatives}

### Test Image:
{query}

Provide your output in the following format:

- **Analysis**: (Your analysis here)
- **Rule**: (The distinguishing rule here)
- **Test Image**: (Test image details)
- **Conclusion**: (cat_1 or cat_2)
"""

WG_CAPTION_CHOICE_TEMPLATE = """\
Below is a detailed description of an image, followed by two candidate captions.

### Image Description:
{anchor}

### Candidate Captions:
A. {option_a}
B. {option_b}

Which caption best matches the image described above? Answer with exactly one letter, A or B, and nothing else.
"""

WG_IMAGE_CHOICE_TEMPLATE = """\
Below is a caption, followed by detailed descriptions of two candidate images.

### Caption:
{anchor}

### Image A Description:
{option_a}

### Image B Description:
{option_b}

Which image description best matches the caption above? Answer with exactly one letter, A or B, and nothing else.
"""

TEMPLATES: dict[TemplateId, str] = {
    TemplateId.DVRL: DVRL_TEMPLATE,
    TemplateId.DVRL_MINIMAL: DVRL_MINIMAL_TEMPLATE,
    TemplateId.DRL_EXTRACT: DRL_EXTRACT_TEMPLATE + DRL_EXTRACT_POSITIVES_ONLY_TEMPLATE,
    TemplateId.DRL_APPLY: DRL_APPLY_TEMPLATE,
    TemplateId.RULE_APPLY_ABLATION: DRL_APPLY_TEMPLATE,
    TemplateId.CA_DESCRIBE: CA_DESCRIBE_TEMPLATE,
    TemplateId.CA_REASON: CA_REASON_TEMPLATE,
    TemplateId.WG_CAPTION_CHOICE: WG_CAPTION_CHOICE_TEMPLATE,
    TemplateId.WG_IMAGE_CHOICE: WG_IMAGE_CHOICE_TEMPLATE,
}


def template_hash(template_id: TemplateId | str) -> str:
    body = TEMPLATES[TemplateId(template_id)]
    return hashlib.sha256(body.encode("utf-8")).hexdigest()[:16]


def _check_counts(m: int, n: int) -> None:
    if m < 0 or n < 0:
        raise ParamError(f"Invalid input: m and n must be non-negative. Received m={m}, n={n}.")
    if m < 1:
        raise ParamError(f"at least one positive sample is required, got m={m}")


def render_dvrl(m: int, n: int, minimal: bool = False) -> str:
    _check_counts(m, n)
    template = DVRL_MINIMAL_TEMPLATE if minimal else DVRL_TEMPLATE
    return template.format(total=m + n + 1, m=m, n=n)


def render_drl_extract(m: int, n: int) -> str:
    _check_counts(m, n)
    if n == 0:
        return DRL_EXTRACT_POSITIVES_ONLY_TEMPLATE.format(m=m)
    return DRL_EXTRACT_TEMPLATE.format(total=m + n, m=m, n=n)


def render_drl_apply(m: int, n: int, summary: RuleSummary | str) -> str:
    _check_counts(m, n)
    text = summary.text if isinstance(summary, RuleSummary) else summary
    if not text or not text.strip():
        raise EmptyRule("rule summary is empty")
    return DRL_APPLY_TEMPLATE.format(m=m, n=n, summary=text)


def render_ca_describe() -> str:
    return CA_DESCRIBE_TEMPLATE


def render_ca_reason(
    descriptions: Sequence[str], m: int, n: int, section_style: str = "blocks"
) -> str:
    """Splice ``m + n + 1`` description documents (positives, negatives, query).

    ``section_style="blocks"`` separates documents by a blank line;
    ``"pylist"`` renders each context section as a Python list literal, which
    is what interpolating a list slice into an f-string produces.
    """
    _check_counts(m, n)
    if len(descriptions) != m + n + 1:
        raise CountMismatch(f"expected {m + n + 1} descriptions, got {len(descriptions)}")
    docs = [d.strip() for d in descriptions]
    pos, neg, query = docs[:m], docs[m : m + n], docs[-1]
    if section_style == "blocks":
        positives, negatives = "\n\n".join(pos), "\n\n".join(neg)
    elif section_style == "pylist":
        positives, negatives = str(pos), str(neg)
    else:
        raise ParamError(f"unknown section_style {section_style!r}")
    return CA_REASON_TEMPLATE.format(m=m, n=n, positives=positives, negatives=negatives, query=query)


def render_winoground_choice(kind: TemplateId | str, anchor: str, option_a: str, option_b: str) -> str:
    """Two-way forced choice; option 0 is always ``A`` and option 1 ``B``."""
    kind = TemplateId(kind)
    for name, value in (("anchor", anchor), ("option_a", option_a), ("option_b", option_b)):
        if not value or not value.strip():
            raise EmptyField(f"{name} is empty")
    if kind is TemplateId.WG_CAPTION_CHOICE:
        template = WG_CAPTION_CHOICE_TEMPLATE
    elif kind is TemplateId.WG_IMAGE_CHOICE:
        template = WG_IMAGE_CHOICE_TEMPLATE
    else:
        raise ParamError(f"{kind.value} is not a Winoground choice template")
    return template.format(anchor=anchor.strip(), option_a=option_a.strip(), option_b=option_b.strip())


GOLDEN_SUMMARY = "people riding bicycles"


def golden_ca_documents(m: int = 6, n: int = 6) -> list[str]:
    docs = [f'{{"Summary": "positive sample {i + 1}"}}' for i in range(m)]
    docs += [f'{{"Summary": "negative sample {i + 1}"}}' for i in range(n)]
    docs.append('{"Summary": "test image"}')
    return docs


def snapshot_prompts() -> dict[str, str]:
    """Canonical renders keyed by the file names used for goldens and ``prompts --dump``."""
    return {
        "dvrl_m6_n6.txt": render_dvrl(6, 6),
        "dvrl_minimal_m6_n6.txt": render_dvrl(6, 6, minimal=True),
        "drl_extract_m6_n6.txt": render_drl_extract(6, 6),
        "drl_extract_m6_n0.txt": render_drl_extract(6, 0),
        "drl_apply_m6_n6.txt": render_drl_apply(6, 6, GOLDEN_SUMMARY),
        "ca_describe.txt": render_ca_describe(),
        "ca_reason_m6_n6.txt": render_ca_reason(golden_ca_documents(), 6, 6),
    }


def dump_prompts(directory: str | Path) -> list[Path]:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, text in snapshot_prompts().items():
        path = out / name
        path.write_text(text, encoding="utf-8", newline="\n")
        written.append(path)
    return written
