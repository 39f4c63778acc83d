"""Rule-based synthesis provider.

Implements every synthesis task deterministically so the whole engine runs
reproducibly with no external service. The provider plays the roles an LLM
would play: reviewing queries for ambiguity, drafting step sketches, writing
plans, coding node bodies, critiquing them, diagnosing faults, and phrasing
answers.

The contract between the plan writer and the node coder is a small controlled
description grammar; the writer renders each node's description from intended
parameters and the coder parses descriptions back into template bodies:

    Keep columns: a, b, c.
    Keep rows where col == 'x'.
    Join A with B on a = b, keeping right rows where k == 'label',
        collecting v into out and counting matches into n, with one row per
        left row.
    Match A against B by comparing x with y at similarity at least 0.8,
        best match only.
    Score the entity labels in col against the keywords: a, b; write the
        result into out.
    Score col over the range 0 to 10 into out; higher values mean higher
        scores.
    Blend a (weight 0.7) and b (weight 0.3) into out.
    Flag rows where col <= 2 into out.
    Sort by a descending, b ascending; write positions into rank; keep the
        top 5.
    Group by a, b; compute count(*) into n, mean(x) into m.
    Expand the annotation json in col: emit one row per item of field with
        fields a:int64, b:text; copy c, d.

An optional trailing clause "Decode images from col supporting .png, .jpg."
on filter/classify nodes simulates media decoding (the source of mid-stream
format faults). Fused nodes join step descriptions with " Then: ".

Two deliberate quirks reproduce realistic synthesis behavior: the coder's
first draft of a range scorer always scores lower values higher (a documented
blind spot the critic catches from the description and sample correlation),
and the writer never guesses cross-source join keys, requesting joinability
evidence instead.
"""

from __future__ import annotations

import json
import re
from typing import Any

from ..errors import TemplateParamError
from ..templates import PIPELINE, validate_body
from ..values import Schema
from .base import SynthesisRequest, SynthesisResponse, UsageMeter, validate_payload

DEFAULT_WEIGHTS = (0.7, 0.3)
YEAR_RANGE = (1900, 2030)
PLAIN_OBJECT_COUNT_MAX = 2
LABEL_ATTRIBUTE_KEY = "label"

_STOPWORDS = {
    "the", "a", "an", "in", "on", "of", "to", "is", "are", "that", "it",
    "and", "or", "with", "for", "as", "by", "at", "be", "this", "was",
}

# interpretation table: subjective term -> (answer cue -> keyword list)
_MEANINGS: dict[str, dict[str, list[str]]] = {
    "exciting": {
        "uncommon": ["gun", "murder", "chase", "explosion", "fight", "escape"],
        "action": ["chase", "fight", "explosion", "stunt"],
        "": ["gun", "chase", "explosion", "fight"],
    },
    "scary": {"": ["ghost", "monster", "night", "scream"]},
    "fun": {"": ["party", "game", "joke", "dance"]},
}

_NOUN_FORMS = {
    "exciting": "excitement",
    "boring": "tedium",
    "scary": "scariness",
    "fun": "fun",
    "good": "quality",
    "interesting": "interest",
    "popular": "popularity",
}


def _tokens_with_spans(text: str) -> list[tuple[str, int, int]]:
    return [
        (m.group(0).lower(), m.start(), m.end())
        for m in re.finditer(r"[A-Za-z][A-Za-z0-9_-]*", text)
    ]


def _quoted_spans(text: str) -> list[tuple[int, int, str]]:
    spans = []
    for m in re.finditer(r"'([^']*)'|\"([^\"]*)\"", text):
        inner = m.group(1) if m.group(1) is not None else m.group(2)
        spans.append((m.start(), m.end(), inner))
    return spans


def _content_words(text: str) -> list[str]:
    out = []
    for tok, _, _ in _tokens_with_spans(text):
        if tok not in _STOPWORDS and len(tok) > 2 and tok not in out:
            out.append(tok)
    return out


# ---------------------------------------------------------------------------
# description grammar: rendering


def _render_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return f"'{v}'"
    return json.dumps(v)


def _render_predicate(pred: dict) -> str:
    return f"{pred['column']} {pred['op']} {_render_value(pred.get('value'))}"


def render_description(kind: str, params: dict, inputs: list[str]) -> str:
    """Canonical description for a template body; the coder inverts this."""
    if kind == "project":
        return "Keep columns: " + ", ".join(params["columns"]) + "."
    if kind == "filter":
        text = "Keep rows where " + _render_predicate(params) + "."
        return text + _render_decode(params)
    if kind == "classify_boolean":
        text = (
            "Flag rows where " + _render_predicate(params) + f" into {params['into']}."
        )
        return text + _render_decode(params)
    if kind == "equi_join":
        left, right = inputs
        lcol = params.get("left_column") or "?"
        rcol = params.get("right_column") or "?"
        text = f"Join {left} with {right} on {lcol} = {rcol}"
        if params.get("right_where"):
            text += ", keeping right rows where " + _render_predicate(params["right_where"])
        collect = params.get("collect")
        if collect:
            text += f", collecting {collect['column']} into {collect['into']}"
            if collect.get("count_into"):
                text += f" and counting matches into {collect['count_into']}"
            text += ", with one row per left row"
        return text + "."
    if kind == "similarity_join":
        left, right = inputs
        threshold = params.get("threshold")
        text = (
            f"Match {left} against {right} by comparing {params['left_column']} with "
            f"{params['right_column']} at similarity at least "
            f"{'?' if threshold is None else json.dumps(threshold)}"
        )
        text += ", best match only." if params.get("one_to_one", True) else (
            ", allowing multiple matches."
        )
        return text
    if kind == "keyword_score":
        return (
            f"Score the entity labels in {params['text_column']} against the keywords: "
            + ", ".join(params["keywords"])
            + f"; write the result into {params['into']}."
        )
    if kind == "numeric_score":
        direction = (
            "higher values mean higher scores"
            if params.get("direction", "ascending") == "ascending"
            else "lower values mean higher scores"
        )
        return (
            f"Score {params['column']} over the range {json.dumps(params['low'])} to "
            f"{json.dumps(params['high'])} into {params['into']}; {direction}."
        )
    if kind == "combine_scores":
        parts = [
            f"{c} (weight {json.dumps(w)})"
            for c, w in zip(params["columns"], params["weights"])
        ]
        if len(parts) > 1:
            joined = ", ".join(parts[:-1]) + " and " + parts[-1]
        else:
            joined = parts[0]
        return f"Blend {joined} into {params['into']}."
    if kind == "sort_rank":
        by = params["by"]
        descending = params.get("descending", False)
        flags = descending if isinstance(descending, list) else [descending] * len(by)
        cols = ", ".join(
            f"{c} {'descending' if d else 'ascending'}" for c, d in zip(by, flags)
        )
        text = f"Sort by {cols}"
        if params.get("rank_into"):
            text += f"; write positions into {params['rank_into']}"
        if params.get("limit") is not None:
            text += f"; keep the top {params['limit']}"
        return text + "."
    if kind == "group_aggregate":
        aggs = ", ".join(
            f"{a['fn']}({a['column']}) into {a['into']}" for a in params["aggregations"]
        )
        return "Group by " + ", ".join(params["group_by"]) + f"; compute {aggs}."
    if kind == "populate_view":
        fields = ", ".join(f"{n}:{t}" for n, t in params["fields"])
        text = (
            f"Expand the annotation json in {params['json_column']}: emit one row per "
            f"item of {params['items_field']} with fields {fields}"
        )
        if params.get("copy"):
            text += "; copy " + ", ".join(params["copy"])
        return text + "."
    raise TemplateParamError(f"cannot render description for kind {kind!r}")


def _render_decode(params: dict) -> str:
    if params.get("uri_column"):
        formats = ", ".join(params.get("supported_formats", []))
        return f" Decode images from {params['uri_column']} supporting {formats}."
    return ""


# ---------------------------------------------------------------------------
# description grammar: parsing (the coder)


def _parse_value(raw: str) -> Any:
    raw = raw.strip()
    if raw.startswith("'") and raw.endswith("'"):
        return raw[1:-1]
    if raw == "true":
        return True
    if raw == "false":
        return False
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        return raw


_PRED = r"(?P<col>[A-Za-z_][\w]*)\s+(?P<op>==|!=|<=|>=|<|>|contains)\s+(?P<val>'[^']*'|\S+?)"


def _split_decode(text: str) -> tuple[str, dict]:
    m = re.search(r"\s*Decode images from (\w+) supporting (.+?)\.\s*$", text)
    if not m:
        return text, {}
    formats = [f.strip() for f in m.group(2).split(",") if f.strip()]
    return text[: m.start()], {
        "uri_column": m.group(1),
        "supported_formats": formats,
        "normalize_formats": False,
    }


def parse_description(description: str, round_no: int = 1, hint: str | None = None) -> dict | None:
    """Parse one grammar sentence (or a fused " Then: " chain) into a body.

    Returns None when no template matches. ``round_no``/``hint`` model the
    coder's iterative behavior: range scorers default to descending until a
    hint corrects them, and "set param=value" hints patch the parsed params.
    """
    description = description.strip()
    if " Then: " in description:
        steps = []
        for part in description.split(" Then: "):
            body = parse_description(part, round_no, hint)
            if body is None:
                return None
            steps.append(body)
        return {"kind": PIPELINE, "steps": steps}
    body = _parse_single(description, round_no)
    if body is None:
        return None
    if hint:
        _apply_hint(body, hint)
    return body


def _parse_single(text: str, round_no: int) -> dict | None:
    text = text.strip()
    if text.startswith("Keep columns:"):
        cols = [c.strip() for c in text[len("Keep columns:"):].rstrip(".").split(",")]
        return {"kind": "project", "params": {"columns": [c for c in cols if c]}}

    if text.startswith("Keep rows where"):
        core, decode = _split_decode(text)
        m = re.match(r"Keep rows where\s+" + _PRED + r"\s*\.$", core.strip())
        if not m:
            return None
        params = {"column": m.group("col"), "op": m.group("op"), "value": _parse_value(m.group("val"))}
        params.update(decode)
        return {"kind": "filter", "params": params}

    if text.startswith("Flag rows where"):
        core, decode = _split_decode(text)
        m = re.match(
            r"Flag rows where\s+" + _PRED + r"\s+into\s+(?P<into>\w+)\s*\.$", core.strip()
        )
        if not m:
            return None
        params = {
            "column": m.group("col"),
            "op": m.group("op"),
            "value": _parse_value(m.group("val")),
            "into": m.group("into"),
        }
        params.update(decode)
        return {"kind": "classify_boolean", "params": params}

    if text.startswith("Join "):
        m = re.match(
            r"Join\s+(?P<l>\w+)\s+with\s+(?P<r>\w+)\s+on\s+(?P<lc>[\w?]+)\s*=\s*(?P<rc>[\w?]+)"
            r"(?P<rest>.*)\.$",
            text,
        )
        if not m:
            return None
        params: dict[str, Any] = {
            "left_column": None if m.group("lc") == "?" else m.group("lc"),
            "right_column": None if m.group("rc") == "?" else m.group("rc"),
        }
        rest = m.group("rest")
        rw = re.search(r"keeping right rows where\s+" + _PRED, rest)
        if rw:
            params["right_where"] = {
                "column": rw.group("col"),
                "op": rw.group("op"),
                "value": _parse_value(rw.group("val")),
            }
        cm = re.search(r"collecting\s+(\w+)\s+into\s+(\w+)(?:\s+and counting matches into\s+(\w+))?", rest)
        if cm:
            collect = {"column": cm.group(1), "into": cm.group(2), "sep": " ; "}
            if cm.group(3):
                collect["count_into"] = cm.group(3)
            params["collect"] = collect
        return {"kind": "equi_join", "params": params}

    if text.startswith("Match "):
        m = re.match(
            r"Match\s+(?P<l>\w+)\s+against\s+(?P<r>\w+)\s+by comparing\s+(?P<lc>\w+)\s+with\s+"
            r"(?P<rc>\w+)\s+at similarity at least\s+(?P<t>[\d.?]+)\s*,\s*"
            r"(?P<mode>best match only|allowing multiple matches)\.$",
            text,
        )
        if not m:
            return None
        threshold = None if m.group("t") == "?" else float(m.group("t"))
        return {
            "kind": "similarity_join",
            "params": {
                "left_column": m.group("lc"),
                "right_column": m.group("rc"),
                "threshold": threshold,
                "one_to_one": m.group("mode") == "best match only",
            },
        }

    if text.startswith("Score the entity labels in"):
        m = re.match(
            r"Score the entity labels in\s+(?P<col>\w+)\s+against the keywords:\s+"
            r"(?P<kw>[^;]+);\s*write the result into\s+(?P<into>\w+)\s*\.$",
            text,
        )
        if not m:
            return None
        keywords = [k.strip() for k in m.group("kw").split(",") if k.strip()]
        return {
            "kind": "keyword_score",
            "params": {
                "text_column": m.group("col"),
                "keywords": keywords,
                "into": m.group("into"),
                "sep": " ; ",
            },
        }

    if text.startswith("Score "):
        m = re.match(
            r"Score\s+(?P<col>\w+)\s+over the range\s+(?P<low>-?[\d.]+)\s+to\s+"
            r"(?P<high>-?[\d.]+)\s+into\s+(?P<into>\w+);\s*"
            r"(?P<dir>higher|lower) values mean higher scores\.$",
            text,
        )
        if not m:
            return None
        # Blind spot: the first draft always scores the low end of the range
        # highest, whatever the description says. The critic catches this.
        direction = "descending"
        if round_no > 1 and m.group("dir") == "higher":
            direction = "ascending"
        return {
            "kind": "numeric_score",
            "params": {
                "column": m.group("col"),
                "low": _parse_value(m.group("low")),
                "high": _parse_value(m.group("high")),
                "into": m.group("into"),
                "direction": direction,
            },
        }

    if text.startswith("Blend "):
        m = re.match(r"Blend\s+(?P<parts>.+)\s+into\s+(?P<into>\w+)\.$", text)
        if not m:
            return None
        columns, weights = [], []
        for pm in re.finditer(r"(\w+)\s+\(weight\s+([\d.]+)\)", m.group("parts")):
            columns.append(pm.group(1))
            weights.append(float(pm.group(2)))
        if not columns:
            return None
        return {
            "kind": "combine_scores",
            "params": {"columns": columns, "weights": weights, "into": m.group("into")},
        }

    if text.startswith("Sort by"):
        m = re.match(
            r"Sort by\s+(?P<cols>[^;.]+)"
            r"(?:;\s*write positions into\s+(?P<rank>\w+))?"
            r"(?:;\s*keep the top\s+(?P<limit>\d+))?\.$",
            text,
        )
        if not m:
            return None
        by, flags = [], []
        for part in m.group("cols").split(","):
            cm = re.match(r"\s*(\w+)\s+(descending|ascending)\s*$", part)
            if not cm:
                return None
            by.append(cm.group(1))
            flags.append(cm.group(2) == "descending")
        params: dict[str, Any] = {"by": by, "descending": flags}
        if m.group("rank"):
            params["rank_into"] = m.group("rank")
        if m.group("limit"):
            params["limit"] = int(m.group("limit"))
        return {"kind": "sort_rank", "params": params}

    if text.startswith("Group by"):
        m = re.match(r"Group by\s+(?P<cols>[^;]+);\s*compute\s+(?P<aggs>.+)\.$", text)
        if not m:
            return None
        group_by = [c.strip() for c in m.group("cols").split(",") if c.strip()]
        aggs = []
        for am in re.finditer(r"(\w+)\(([\w*]+)\)\s+into\s+(\w+)", m.group("aggs")):
            aggs.append({"fn": am.group(1), "column": am.group(2), "into": am.group(3)})
        if not aggs:
            return None
        return {
            "kind": "group_aggregate",
            "params": {"group_by": group_by, "aggregations": aggs},
        }

    if text.startswith("Expand the annotation json in"):
        m = re.match(
            r"Expand the annotation json in\s+(?P<col>\w+):\s*emit one row per item of\s+"
            r"(?P<field>\w+)\s+with fields\s+(?P<fields>[^;.]+)(?:;\s*copy\s+(?P<copy>[^.]+))?\.$",
            text,
        )
        if not m:
            return None
        fields = []
        for fm in re.finditer(r"(\w+):(\w+)", m.group("fields")):
            fields.append([fm.group(1), fm.group(2)])
        params: dict[str, Any] = {
            "json_column": m.group("col"),
            "items_field": m.group("field"),
            "fields": fields,
        }
        if m.group("copy"):
            params["copy"] = [c.strip() for c in m.group("copy").split(",") if c.strip()]
        return {"kind": "populate_view", "params": params}

    return None


def _apply_hint(body: dict, hint: str) -> None:
    """Apply "set param=value" fragments from a critic hint to the body."""
    target = body
    if body.get("kind") == PIPELINE:
        for step in body.get("steps", []):
            _apply_hint(step, hint)
        return
    for m in re.finditer(r"set\s+(\w+)\s*=\s*(\S+)", hint):
        target.setdefault("params", {})[m.group(1)] = _parse_value(m.group(2))


# ---------------------------------------------------------------------------
# the provider


class DeterministicProvider:
    """Implements all ten synthesis tasks with deterministic rules."""

    def __init__(self, config=None):
        from ..config import EngineConfig

        self.config = config or EngineConfig()
        self.usage = UsageMeter()

    def run(self, request: SynthesisRequest) -> SynthesisResponse:
        handler = getattr(self, f"_t_{request.task}", None)
        if handler is None:
            raise TemplateParamError(f"unknown synthesis task {request.task!r}")
        payload = handler(request.context)
        validate_payload(request.format_schema, payload)
        self.usage.record(request.task)
        return SynthesisResponse(payload=payload, usage={"calls": 1, "provider": "deterministic"})

    # -- query review ---------------------------------------------------------

    def _t_review_query(self, ctx: dict) -> dict:
        query = ctx["query"]
        clarifications = ctx.get("clarifications", [])
        lexicon = [t.lower() for t in ctx.get("lexicon", self.config.ambiguity_lexicon)]
        ask_quoted = ctx.get("ask_about_quoted", self.config.ask_about_quoted)
        max_rounds = ctx.get("max_rounds", self.config.max_clarification_rounds)
        resolved = {c["term"].lower() for c in clarifications if c.get("answer")}
        quoted = _quoted_spans(query)
        assumptions: list[str] = []
        candidates: list[str] = []
        for tok, start, end in _tokens_with_spans(query):
            if tok not in lexicon or tok in resolved or tok in candidates:
                continue
            in_quotes = any(qs <= start and end <= qe for qs, qe, _ in quoted)
            if in_quotes and not ask_quoted:
                note = (
                    f"Treating the quoted term '{tok}' as a label whose interpretation "
                    "is shown in the sketch for review."
                )
                if note not in assumptions:
                    assumptions.append(note)
                continue
            candidates.append(tok)
        if not ask_quoted:
            for _, _, phrase in quoted:
                words = phrase.lower().split()
                if len(words) == 1 and words[0] not in lexicon:
                    note = (
                        f"Treating the quoted term '{phrase}' as a label whose "
                        "interpretation is shown in the sketch for review."
                    )
                    if note not in assumptions:
                        assumptions.append(note)
        if candidates and len(clarifications) < max_rounds:
            term = candidates[0]
            return {
                "action": "ask",
                "question": f"What does '{term}' mean in this context?",
                "term": term,
                "assumptions": assumptions,
            }
        for leftover in candidates:
            assumptions.append(f"Assuming a generic reading of '{leftover}'.")
        return {"action": "forward", "question": None, "term": None, "assumptions": assumptions}

    # -- sketching ----------------------------------------------------------------

    def _keywords_for(self, term: str, clarifications: list[dict]) -> list[str]:
        answer = ""
        for c in clarifications:
            if c.get("term", "").lower() == term and c.get("answer"):
                answer = c["answer"].lower()
        table = _MEANINGS.get(term, {})
        for cue, keywords in table.items():
            if cue and cue in answer:
                return list(keywords)
        if answer:
            words = _content_words(answer)
            if words:
                return words[:8]
        if "" in table:
            return list(table[""])
        return [term]

    def _sketch_intents(self, ctx: dict) -> dict:
        query = ctx["query"]
        low = query.lower()
        catalog = ctx.get("catalog", {"relations": {}, "bundles": {}})
        relations = catalog.get("relations", {})
        bundles = catalog.get("bundles", {})
        bases = sorted(n for n, d in relations.items() if d.get("kind") == "base")
        base = None
        for name in bases:
            if name.lower() in low:
                base = name
                break
        if base is None and bases:
            base = bases[0]

        rank_term = None
        m = re.search(r"by how (\w+)", low)
        if m:
            rank_term = m.group(1)
        elif ctx.get("clarifications"):
            rank_term = ctx["clarifications"][0]["term"].lower()

        poster_label = None
        pm = re.search(r"poster[s]? should(?:n't| not)? be '?([A-Za-z]+)'?", low)
        if pm:
            poster_label = pm.group(1)

        preferences = list(ctx.get("preferences", []))
        recency = any(
            re.search(r"recent|newer|latest|new releases", p.lower()) for p in preferences
        )
        weights = list(DEFAULT_WEIGHTS)
        for p in preferences:
            wm = re.search(r"(\d+(?:\.\d+)?)\s*(?:versus|vs|:|/)\s*(\d+(?:\.\d+)?)", p)
            if wm:
                weights = [float(wm.group(1)), float(wm.group(2))]

        year_column = None
        if base:
            for name, vt in relations[base]["schema"]:
                if vt == "int64" and re.search(r"year|date", name):
                    year_column = name
        return {
            "base": base,
            "rank_term": rank_term,
            "poster_label": poster_label,
            "recency": recency,
            "weights": weights,
            "year_column": year_column,
            "has_text": "text" in bundles,
            "has_scene": "scene" in bundles,
            "keywords": self._keywords_for(rank_term, ctx.get("clarifications", []))
            if rank_term
            else [],
        }

    def _t_generate_sketch(self, ctx: dict) -> dict:
        it = self._sketch_intents(ctx)
        noun = _NOUN_FORMS.get(it["rank_term"], it["rank_term"] or "relevance")
        steps: list[str] = []
        if it["base"]:
            steps.append(
                f"Start from the {it['base']} catalog and keep the core details needed "
                "for ranking."
            )
        if it["has_text"] and it["rank_term"]:
            steps.append(
                "Attach the plot entities extracted from each film's linked text document."
            )
        if it["has_scene"] and it["poster_label"]:
            steps.append("Attach the scene objects detected on each film's poster image.")
        if it["rank_term"]:
            steps.append(
                f"Build a keyword list capturing what makes a plot {it['rank_term']}: "
                + ", ".join(it["keywords"])
                + "."
            )
            steps.append(
                f"Score each film's plot entities against those keywords to measure how "
                f"{it['rank_term']} it is."
            )
        if it["recency"] and it["year_column"]:
            w1, w2 = it["weights"]
            steps.append("Score each film's recency so newer releases score higher.")
            steps.append(
                f"Choose blend weights that favor {noun} over recency "
                f"({w1:g} versus {w2:g})."
            )
            steps.append("Blend the two scores into one final score per film.")
        if it["poster_label"]:
            steps.append(
                "Judge each poster from its detected scene objects and decide whether "
                f"it looks {it['poster_label']}."
            )
            steps.append(f"Drop films whose poster was judged {it['poster_label']}.")
        final_score = "final" if (it["recency"] and it["year_column"]) else noun
        steps.append(
            f"Order the remaining films by the {final_score} score and list them with "
            "their details."
        )
        return {"steps": steps}

    def _t_correct_sketch(self, ctx: dict) -> dict:
        feedback = ctx.get("feedback", "")
        preferences = list(ctx.get("preferences", [])) + [feedback]
        regenerated = self._t_generate_sketch({**ctx, "preferences": preferences})
        if regenerated["steps"] == ctx.get("steps"):
            regenerated["steps"] = list(ctx.get("steps", [])) + [
                f"Also honor this note from review: {feedback}"
            ]
        return regenerated

    # -- planning -------------------------------------------------------------------

    def _t_write_plan(self, ctx: dict) -> dict:
        writer = _PlanWriter(ctx, self)
        return writer.build()

    def _t_verify_plan(self, ctx: dict) -> dict:
        return _verify_plan(ctx)

    # -- node synthesis ----------------------------------------------------------------

    def _t_code_node(self, ctx: dict) -> dict:
        description = ctx["signature"]["description"]
        round_no = ctx.get("round", 1)
        hint = ctx.get("hint")
        body = parse_description(description, round_no=round_no, hint=hint)
        if body is None:
            return {"body": None, "note": "no operator template matches the description"}
        return {"body": body, "note": None}

    def _t_critique_node(self, ctx: dict) -> dict:
        sig = ctx["signature"]
        body = ctx["body"]
        input_schemas = [Schema.from_wire(cols) for cols in ctx.get("input_schemas", [])]
        fault = ctx.get("fault")
        if fault:
            diag = self._t_diagnose_fault({"body": body, "fault": fault})
            if diag["action"] == "patch_params":
                hint = "profiling hit a fault; " + " ".join(
                    f"set {k}={_render_value(v) if isinstance(v, str) else json.dumps(v)}"
                    for k, v in (diag.get("set") or {}).items()
                )
                return {"verdict": "HINT", "hint": hint}
            return {"verdict": "ESCALATE", "hint": f"unrepairable fault: {fault.get('message')}"}
        try:
            out_schema = validate_body(body, input_schemas)
        except TemplateParamError as exc:
            return {"verdict": "HINT", "hint": f"body does not validate: {exc}"}
        declared = sig["output"]["columns"]
        if out_schema.to_wire() != declared:
            return {
                "verdict": "HINT",
                "hint": f"output schema mismatch: body yields {out_schema.to_wire()}, "
                f"signature declares {declared}",
            }
        hint = self._direction_hint(sig, body, ctx)
        if hint:
            return {"verdict": "HINT", "hint": hint}
        hint = self._range_hint(body, ctx.get("sample_outputs") or [])
        if hint:
            return {"verdict": "HINT", "hint": hint}
        return {"verdict": "PASS", "hint": None}

    def _direction_hint(self, sig: dict, body: dict, ctx: dict) -> str | None:
        bodies = body.get("steps", [body]) if body.get("kind") == PIPELINE else [body]
        for b in bodies:
            if b.get("kind") != "numeric_score":
                continue
            params = b.get("params", {})
            wants_ascending = "higher values mean higher scores" in sig["description"]
            is_ascending = params.get("direction", "ascending") == "ascending"
            if wants_ascending and not is_ascending:
                samples_note = ""
                outs = ctx.get("sample_outputs") or []
                col, into = params.get("column"), params.get("into")
                vals = [
                    (r.get(col), r.get(into))
                    for r in outs
                    if r.get(col) is not None and r.get(into) is not None
                ]
                if len({v for v, _ in vals}) >= 2:
                    samples_note = " (sample scores fall as the input rises)"
                return (
                    "the description asks for higher inputs to score higher but the "
                    f"draft scores them lower{samples_note}; set direction=ascending"
                )
            if not wants_ascending and is_ascending:
                return (
                    "the description asks for lower inputs to score higher; "
                    "set direction=descending"
                )
        return None

    def _range_hint(self, body: dict, sample_outputs: list[dict]) -> str | None:
        from ..templates import score_ranges

        for column, (low, high) in score_ranges(body).items():
            for row in sample_outputs:
                value = row.get(column)
                if value is not None and not (low <= value <= high):
                    return (
                        f"sample value {value!r} of {column} falls outside "
                        f"[{low}, {high}]; set scale=1"
                    )
        return None

    # -- dependency classification -------------------------------------------------------

    def _t_classify_dependency(self, ctx: dict) -> dict:
        body = ctx.get("body")
        if body and body.get("kind") and body["kind"] != "external":
            from ..registry import impl_pattern

            return {"pattern": impl_pattern(body).value}
        description = (ctx.get("description") or "").lower()
        if re.search(r"one row per item|per item|expand", description):
            return {"pattern": "one_to_many"}
        if re.search(r"group|aggregate|summar", description):
            return {"pattern": "many_to_one"}
        if re.search(r"join|match|sort|rank|cross", description):
            return {"pattern": "many_to_many"}
        return {"pattern": "one_to_one"}

    # -- fault diagnosis -------------------------------------------------------------

    def _t_diagnose_fault(self, ctx: dict) -> dict:
        body = ctx.get("body") or {}
        fault = ctx.get("fault") or {}
        message = (fault.get("message") or "").lower()
        if body.get("fault"):
            return {
                "action": "remove_fault",
                "set": None,
                "body": None,
                "summary": "patched the implementation to handle the input that failed "
                f"at row {fault.get('cursor')}",
            }
        if "unsupported image format" in message:
            return {
                "action": "patch_params",
                "set": {"normalize_formats": True},
                "body": None,
                "summary": "convert unsupported image containers to a supported format "
                "before decoding",
            }
        return {"action": "give_up", "set": None, "body": None, "summary": "no safe patch available"}

    # -- question answering -----------------------------------------------------------

    def _t_answer_question(self, ctx: dict) -> dict:
        if ctx.get("phase") == "classify":
            return self._classify_question(ctx)
        category = ctx.get("category", "")
        facts = ctx.get("facts", {})
        sentences = facts.get("sentences", [])
        lead = {
            "which_function": "Origin:",
            "why_included": "Why this row is in the result:",
            "why_excluded": "Why this value is missing from the result:",
            "what_changed": "What the repair changed:",
        }.get(category, "")
        answer = " ".join([lead] + sentences).strip() if sentences else lead
        return {"category": category, "target": None, "answer": answer}

    def _classify_question(self, ctx: dict) -> dict:
        question = ctx.get("question", "")
        low = question.lower()
        known_columns = ctx.get("known_columns", [])
        known_functions = ctx.get("known_functions", [])
        target: dict[str, Any] = {}
        lid_m = re.search(r"lid\s*[#]?\s*(\d+)", low)
        if lid_m:
            target["lid"] = int(lid_m.group(1))
        quoted = _quoted_spans(question)
        if quoted:
            target["value"] = quoted[0][2]
        for col in known_columns:
            if re.search(rf"\b{re.escape(col)}\b", question):
                target["column"] = col
                break
        for fn in known_functions:
            if re.search(rf"\b{re.escape(fn)}\b", question):
                target["function"] = fn
                break
        if re.search(r"changed after|before and after|repair", low) or (
            "what" in low and "changed" in low
        ):
            return {"category": "what_changed", "target": target, "answer": None}
        if re.search(r"why .*(not |n't |excluded|missing|left out|dropped)", low):
            return {"category": "why_excluded", "target": target, "answer": None}
        if re.search(r"why .*(included|in the result|in the list|ranked|kept|appear)", low):
            return {"category": "why_included", "target": target, "answer": None}
        if re.search(r"(which|what) function (produced|made|created|wrote|computed|generated)", low):
            return {"category": "which_function", "target": target, "answer": None}
        return {"category": "unsupported", "target": target, "answer": None}


# ---------------------------------------------------------------------------
# plan writing


class _PlanWriter:
    """Translates sketch steps into plan nodes using the description grammar.

    Never guesses cross-source join keys: without joinability evidence in the
    hints it emits "on ? = ?" and lets the verifier request the evidence.
    """

    def __init__(self, ctx: dict, provider: DeterministicProvider):
        self.ctx = ctx
        self.provider = provider
        self.catalog = ctx.get("catalog", {"relations": {}, "bundles": {}})
        self.relations = self.catalog.get("relations", {})
        self.bundles = self.catalog.get("bundles", {})
        self.hints = ctx.get("hints", {})
        self.nodes: list[dict] = []
        self.coverage: dict[str, list[str]] = {}
        self.schemas: dict[str, list[list[str]]] = {
            name: [
                [n, t]
                for n, t in desc.get("schema", [])
                if n not in ("lid", "parent_lid")
            ]
            for name, desc in self.relations.items()
        }
        self.base_of: dict[str, str] = {name: name for name in self.relations}
        self.frontier: str | None = None
        self.branch: str | None = None
        self.score_columns: list[str] = []
        self.pending_keywords: list[str] = []
        self.pending_weights: list[float] | None = None
        self.pending_steps: list[str] = []

    # -- helpers ---------------------------------------------------------------

    def _singular(self, name: str) -> str:
        return name[:-1] if name.endswith("s") else name

    def _base(self) -> str | None:
        bases = sorted(n for n, d in self.relations.items() if d.get("kind") == "base")
        if not bases:
            return None
        low = self.ctx.get("query", "").lower()
        for name in bases:
            if name.lower() in low:
                return name
        return bases[0]

    def _join_keys(self, left: str, right: str) -> tuple[str | None, str | None]:
        lbase, rbase = self.base_of.get(left, left), self.base_of.get(right, right)
        ranked = self.hints.get("joinability", {}).get(f"{lbase}|{rbase}", [])
        left_cols = {n for n, _ in self.schemas.get(left, [])}
        right_cols = {n for n, _ in self.schemas.get(right, [])}
        for cand in ranked:
            if cand["left_column"] in left_cols and cand["right_column"] in right_cols:
                return cand["left_column"], cand["right_column"]
        return None, None

    def _add_node(
        self, name: str, inputs: list[str], output: str, kind: str, params: dict, step_no: int
    ) -> None:
        description = render_description(kind, params, inputs)
        body = parse_description(description, round_no=2)
        columns: list[list[str]]
        if body is not None and not _body_incomplete(body):
            try:
                out_schema = validate_body(
                    body, [Schema.from_wire(self.schemas[i]) for i in inputs]
                )
                columns = out_schema.to_wire()
            except TemplateParamError:
                columns = self._fallback_columns(kind, params, inputs)
        else:
            columns = self._fallback_columns(kind, params, inputs)
        self.nodes.append(
            {
                "name": name,
                "inputs": list(inputs),
                "output": {"name": output, "columns": columns},
                "description": description,
            }
        )
        self.schemas[output] = columns
        self.base_of[output] = self.base_of.get(inputs[0], inputs[0])
        steps = list(dict.fromkeys(self.pending_steps + [str(step_no)]))
        self.pending_steps = []
        for s in steps:
            self.coverage.setdefault(s, []).append(name)

    def _fallback_columns(self, kind: str, params: dict, inputs: list[str]) -> list[list[str]]:
        """Output columns for join nodes whose keys are still unresolved."""
        left = [list(c) for c in self.schemas[inputs[0]]]
        if kind == "equi_join" and params.get("collect"):
            collect = params["collect"]
            left.append([collect["into"], "text"])
            if collect.get("count_into"):
                left.append([collect["count_into"], "int64"])
            return left
        if kind in ("equi_join", "similarity_join") and len(inputs) == 2:
            names = {n for n, _ in left}
            for n, t in self.schemas[inputs[1]]:
                if n not in names:
                    left.append([n, t])
            if kind == "similarity_join":
                left.append([params.get("similarity_into", "similarity"), "float64"])
        return left

    # -- main -------------------------------------------------------------------

    def build(self) -> dict:
        steps = self.ctx.get("steps", [])
        clarifications = self.ctx.get("clarifications", [])
        for step_no, step in enumerate(steps, start=1):
            low = step.lower()
            if self._explicit(step, step_no):
                continue
            if "start from" in low and "keep" in low:
                base = self._base()
                if base is None:
                    self.pending_steps.append(str(step_no))
                    continue
                cols = [n for n, _ in self.schemas[base]]
                self._add_node(
                    f"select_{self._singular(base)}_columns",
                    [base],
                    f"{base}_core",
                    "project",
                    {"columns": cols},
                    step_no,
                )
                self.frontier = f"{base}_core"
            elif "attach" in low and ("plot" in low or "entities" in low or "text" in low):
                roles = self.bundles.get("text", {})
                right = roles.get("attributes")
                if not right or not self.frontier:
                    self.pending_steps.append(str(step_no))
                    continue
                lcol, rcol = self._join_keys(self.frontier, right)
                params = {
                    "left_column": lcol,
                    "right_column": rcol,
                    "right_where": {"column": "k", "op": "==", "value": LABEL_ATTRIBUTE_KEY},
                    "collect": {"column": "v", "into": "plot_entities", "sep": " ; "},
                }
                self._add_node(
                    "join_plot_entities",
                    [self.frontier, right],
                    "films_with_text",
                    "equi_join",
                    params,
                    step_no,
                )
                self.frontier = "films_with_text"
            elif "attach" in low and ("poster" in low or "scene" in low or "image" in low):
                roles = self.bundles.get("scene", {})
                right = roles.get("objects")
                base = self._base()
                left = f"{base}_core" if base and f"{base}_core" in self.schemas else self.frontier
                if not right or not left:
                    self.pending_steps.append(str(step_no))
                    continue
                lcol, rcol = self._join_keys(left, right)
                params = {
                    "left_column": lcol,
                    "right_column": rcol,
                    "collect": {
                        "column": "cid",
                        "into": "poster_objects",
                        "sep": " ; ",
                        "count_into": "poster_object_count",
                    },
                }
                self._add_node(
                    "join_poster_scene",
                    [left, right],
                    "films_with_image_scene",
                    "equi_join",
                    params,
                    step_no,
                )
                self.branch = "films_with_image_scene"
            elif "keyword list" in low:
                m = re.search(r":\s*(.+)\.$", step)
                if m:
                    self.pending_keywords = [k.strip() for k in m.group(1).split(",") if k.strip()]
                self.pending_steps.append(str(step_no))
            elif "score" in low and ("keyword" in low or "entities" in low):
                tm = re.search(r"how (\w+) it is", low)
                term = tm.group(1) if tm else (
                    clarifications[0]["term"] if clarifications else "relevance"
                )
                noun = _NOUN_FORMS.get(term, term)
                keywords = self.pending_keywords or self.provider._keywords_for(
                    term, clarifications
                )
                self.pending_keywords = []
                if not self.frontier:
                    self.pending_steps.append(str(step_no))
                    continue
                into = f"{noun}_score"
                self._add_node(
                    f"gen_{noun}_score",
                    [self.frontier],
                    f"films_{noun}",
                    "keyword_score",
                    {
                        "text_column": "plot_entities",
                        "keywords": keywords,
                        "into": into,
                        "sep": " ; ",
                    },
                    step_no,
                )
                self.frontier = f"films_{noun}"
                self.score_columns.append(into)
            elif "score" in low and ("recency" in low or "newer" in low or "recent" in low):
                base = self._base()
                year_col = None
                if base:
                    for n, t in self.schemas[base]:
                        if t == "int64" and re.search(r"year|date", n):
                            year_col = n
                if not year_col or not self.frontier:
                    self.pending_steps.append(str(step_no))
                    continue
                self._add_node(
                    "gen_recency_score",
                    [self.frontier],
                    "films_recency",
                    "numeric_score",
                    {
                        "column": year_col,
                        "low": YEAR_RANGE[0],
                        "high": YEAR_RANGE[1],
                        "into": "recency_score",
                        "direction": "ascending",
                    },
                    step_no,
                )
                self.frontier = "films_recency"
                self.score_columns.append("recency_score")
            elif "blend weights" in low or "choose blend" in low:
                wm = re.search(r"\(([\d.]+)\s+versus\s+([\d.]+)\)", step)
                if wm:
                    self.pending_weights = [float(wm.group(1)), float(wm.group(2))]
                self.pending_steps.append(str(step_no))
            elif "blend" in low:
                if len(self.score_columns) < 2 or not self.frontier:
                    self.pending_steps.append(str(step_no))
                    continue
                weights = self.pending_weights or [
                    round(1.0 / len(self.score_columns), 6)
                ] * len(self.score_columns)
                self.pending_weights = None
                self._add_node(
                    "combine_scores",
                    [self.frontier],
                    "films_final",
                    "combine_scores",
                    {
                        "columns": list(self.score_columns),
                        "weights": weights,
                        "into": "final_score",
                    },
                    step_no,
                )
                self.frontier = "films_final"
                self.score_columns = ["final_score"]
            elif "drop" in low or "exclude" in low:
                lm = re.search(r"judged (\w+)", low)
                label = lm.group(1) if lm else "flagged"
                target = self.branch or self.frontier
                if not target:
                    self.pending_steps.append(str(step_no))
                    continue
                self._add_node(
                    f"filter_{label}_posters",
                    [target],
                    "films_poster_kept",
                    "filter",
                    {"column": f"is_{label}", "op": "==", "value": False},
                    step_no,
                )
                if self.branch:
                    self.branch = "films_poster_kept"
                else:
                    self.frontier = "films_poster_kept"
            elif "judge" in low or "decide" in low:
                lm = re.search(r"looks (\w+)", low)
                label = lm.group(1) if lm else "flagged"
                target = self.branch or self.frontier
                if not target:
                    self.pending_steps.append(str(step_no))
                    continue
                self._add_node(
                    f"classify_{label}",
                    [target],
                    "films_poster_class",
                    "classify_boolean",
                    {
                        "column": "poster_object_count",
                        "op": "<=",
                        "value": PLAIN_OBJECT_COUNT_MAX,
                        "into": f"is_{label}",
                    },
                    step_no,
                )
                if self.branch:
                    self.branch = "films_poster_class"
                else:
                    self.frontier = "films_poster_class"
            elif "order" in low or "rank" in low or "sort" in low:
                if not self.frontier:
                    self.pending_steps.append(str(step_no))
                    continue
                if self.branch and self.branch != self.frontier:
                    key = self._shared_key(self.frontier, self.branch)
                    self._add_node(
                        "join_scored_with_posters",
                        [self.frontier, self.branch],
                        "films_joined",
                        "equi_join",
                        {"left_column": key, "right_column": key},
                        step_no,
                    )
                    self.frontier = "films_joined"
                    self.branch = None
                    self.pending_steps.append(str(step_no))
                score = self.score_columns[-1] if self.score_columns else None
                by = [score] if score else [[n for n, _ in self.schemas[self.frontier]][0]]
                self._add_node(
                    "rank_films",
                    [self.frontier],
                    "ranked_films",
                    "sort_rank",
                    {"by": by, "descending": [True], "rank_into": "rank"},
                    step_no,
                )
                self.frontier = "ranked_films"
            else:
                # steps that carry context only (notes, assumptions)
                self.pending_steps.append(str(step_no))
        if self.pending_steps and self.nodes:
            last = self.nodes[-1]["name"]
            for s in self.pending_steps:
                self.coverage.setdefault(s, []).append(last)
            self.pending_steps = []
        return {"nodes": self.nodes, "coverage": self.coverage}

    def _shared_key(self, a: str, b: str) -> str:
        base = self.base_of.get(a)
        key_cols = []
        if base and base in self.relations:
            key_cols = self.relations[base].get("keys", [])
        a_cols = {n for n, _ in self.schemas[a]}
        b_cols = {n for n, _ in self.schemas[b]}
        for k in key_cols:
            if k in a_cols and k in b_cols:
                return k
        shared = sorted(a_cols & b_cols)
        return shared[0] if shared else next(iter(a_cols))

    def _explicit(self, step: str, step_no: int) -> bool:
        """Steps already written in the description grammar become one node."""
        body = parse_description(step, round_no=2)
        if body is None or body.get("kind") == PIPELINE:
            return False
        kind = body["kind"]
        params = body.get("params", {})
        inputs: list[str]
        if kind in ("equi_join", "similarity_join"):
            m = re.match(r"(?:Join|Match)\s+(\w+)\s+(?:with|against)\s+(\w+)", step)
            if not m:
                return False
            inputs = [m.group(1), m.group(2)]
        else:
            if not self.frontier:
                base = self._base()
                if base is None:
                    return False
                self.frontier = base
            inputs = [self.frontier]
        for name in inputs:
            if name not in self.schemas:
                return False
        name = f"step{step_no}_{kind}"
        output = f"{name}_out"
        self._add_node(name, inputs, output, kind, params, step_no)
        self.frontier = output
        if kind in ("keyword_score", "numeric_score", "combine_scores"):
            self.score_columns.append(params["into"])
        return True


def _body_incomplete(body: dict) -> bool:
    if body.get("kind") == PIPELINE:
        return any(_body_incomplete(s) for s in body.get("steps", []))
    params = body.get("params", {})
    return any(
        params.get(k) is None
        for k in ("left_column", "right_column", "threshold")
        if k in params
    )


# ---------------------------------------------------------------------------
# plan verification


def _verify_plan(ctx: dict) -> dict:
    steps = ctx.get("steps", [])
    nodes = ctx.get("nodes", [])
    coverage = ctx.get("coverage", {})
    catalog = ctx.get("catalog", {"relations": {}})
    reasons: list[str] = []
    needs: list[str] = []

    if not nodes:
        return {"verdict": "REJECT", "reasons": ["plan has no nodes"], "needs": []}
    names = [n["name"] for n in nodes]
    if len(set(names)) != len(names):
        reasons.append("node names are not unique")
    outputs = [n["output"]["name"] for n in nodes]
    if len(set(outputs)) != len(outputs):
        reasons.append("node output names are not unique")

    available: dict[str, list[list[str]]] = {
        rel: [[n, t] for n, t in desc.get("schema", []) if n not in ("lid", "parent_lid")]
        for rel, desc in catalog.get("relations", {}).items()
    }
    producers = {n["output"]["name"]: n for n in nodes}
    for node in nodes:
        for inp in node["inputs"]:
            if inp not in available and inp not in producers:
                reasons.append(f"node {node['name']}: input {inp!r} is not resolvable")

    consumed = {inp for n in nodes for inp in n["inputs"]}
    roots = [n for n in nodes if n["output"]["name"] not in consumed]
    if len(roots) != 1:
        reasons.append(f"plan must have exactly one root, found {len(roots)}")

    # per-node description and schema checks, in dependency order
    ordered: list[dict] = []
    placed: set[str] = set()
    pending = list(nodes)
    while pending:
        progressed = False
        for node in list(pending):
            if all(i in available or i in placed for i in node["inputs"]):
                ordered.append(node)
                placed.add(node["output"]["name"])
                available.setdefault(node["output"]["name"], node["output"]["columns"])
                pending.remove(node)
                progressed = True
        if not progressed:
            reasons.append("plan has a dependency cycle")
            break

    for node in ordered:
        body = parse_description(node["description"], round_no=2)
        if body is None:
            reasons.append(
                f"node {node['name']}: description does not map to an operator template"
            )
            continue
        if _body_incomplete(body):
            for inp in node["inputs"]:
                if inp not in needs:
                    needs.append(inp)
            continue
        try:
            schemas = [Schema.from_wire(available[i]) for i in node["inputs"]]
            out_schema = validate_body(body, schemas)
        except TemplateParamError as exc:
            reasons.append(f"node {node['name']}: {exc}")
            continue
        if out_schema.to_wire() != node["output"]["columns"]:
            reasons.append(
                f"node {node['name']}: declared output columns do not match the "
                "template's propagated schema"
            )

    for step_no in range(1, len(steps) + 1):
        covered = coverage.get(str(step_no), [])
        if not covered:
            reasons.append(f"sketch step {step_no} is not covered by any node")
        for name in covered:
            if name not in names:
                reasons.append(f"coverage for step {step_no} names unknown node {name!r}")

    if needs:
        return {
            "verdict": "NEED_INFO",
            "reasons": reasons,
            "needs": needs,
        }
    if reasons:
        return {"verdict": "REJECT", "reasons": reasons, "needs": []}
    return {"verdict": "APPROVE", "reasons": [], "needs": []}
