"""Operator template library.

A physical implementation of a pipeline function is usually an instance of
one of eleven parameterized templates. The template kind fixes the dependency
pattern, which in turn fixes lineage granularity:

    kind              pattern        applied
    ----------------  -------------  --------------------
    project           one_to_one     per row
    filter            one_to_one     per row
    keyword_score     one_to_one     per row
    numeric_score     one_to_one     per row
    combine_scores    one_to_one     per row
    classify_boolean  one_to_one     per row
    populate_view     one_to_many    per row
    group_aggregate   many_to_one    whole table
    equi_join         many_to_many   whole table
    similarity_join   many_to_many   whole table
    sort_rank         many_to_many   whole table

Bodies are JSON dicts {"kind": ..., "params": {...}}. A twelfth body carrier,
"pipeline", chains one_to_one steps produced by operator fusion; it is not a
semantic kind of its own.

Narrow bodies are applied one input row at a time (the executor drives the
cursor); row dicts contain declared column values only. Wide bodies receive
whole tables as (schema, rows) pairs where rows additionally carry their
``lid`` for deterministic tie-breaking.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np

from .embedding import Embedder, cosine_matrix
from .errors import TemplateParamError, EmptyKeywords
from .lineage import DependencyPattern
from .values import SYSTEM_COLUMNS, Column, Schema, ValueType, check_value

TEMPLATE_KINDS = (
    "project",
    "filter",
    "equi_join",
    "similarity_join",
    "keyword_score",
    "numeric_score",
    "combine_scores",
    "classify_boolean",
    "sort_rank",
    "group_aggregate",
    "populate_view",
)

PIPELINE = "pipeline"

PATTERN_BY_KIND: dict[str, DependencyPattern] = {
    "project": DependencyPattern.ONE_TO_ONE,
    "filter": DependencyPattern.ONE_TO_ONE,
    "keyword_score": DependencyPattern.ONE_TO_ONE,
    "numeric_score": DependencyPattern.ONE_TO_ONE,
    "combine_scores": DependencyPattern.ONE_TO_ONE,
    "classify_boolean": DependencyPattern.ONE_TO_ONE,
    "populate_view": DependencyPattern.ONE_TO_MANY,
    "group_aggregate": DependencyPattern.MANY_TO_ONE,
    "equi_join": DependencyPattern.MANY_TO_MANY,
    "similarity_join": DependencyPattern.MANY_TO_MANY,
    "sort_rank": DependencyPattern.MANY_TO_MANY,
    PIPELINE: DependencyPattern.ONE_TO_ONE,
}

COMPARE_OPS = ("==", "!=", "<", "<=", ">", ">=", "contains")

NUM_INPUTS = {kind: 2 if kind in ("equi_join", "similarity_join") else 1 for kind in TEMPLATE_KINDS}


@dataclass
class TemplateContext:
    embedder: Embedder


def body_pattern(body: dict) -> DependencyPattern:
    kind = body.get("kind")
    if kind not in PATTERN_BY_KIND:
        raise TemplateParamError(f"unknown template kind {kind!r}")
    return PATTERN_BY_KIND[kind]


def _declared(schema: Schema) -> list[Column]:
    return [c for c in schema.declared() if c.name not in SYSTEM_COLUMNS]


def _strip_keys(cols: Sequence[Column]) -> list[Column]:
    return [Column(c.name, c.type) for c in cols]


def _need(params: dict, name: str, kind: str) -> Any:
    if name not in params:
        raise TemplateParamError(f"{kind}: missing parameter {name!r}")
    return params[name]


def _fresh_column(name: str, cols: Sequence[Column], kind: str) -> None:
    if any(c.name == name for c in cols):
        raise TemplateParamError(f"{kind}: output column {name!r} collides with an input column")


def _score_into(params: dict, input_schema: Schema, kind: str) -> tuple[str, list[Column]]:
    into = _need(params, "into", kind)
    cols = _strip_keys(_declared(input_schema))
    _fresh_column(into, cols, kind)
    return into, cols + [Column(into, ValueType.FLOAT64)]


# ---------------------------------------------------------------------------
# validation and output-schema propagation


def validate_body(body: dict, input_schemas: list[Schema]) -> Schema:
    """Check a template body against its input schemas; returns output schema.

    Raises TemplateParamError on any structural problem. Pipeline bodies fold
    over their steps.
    """
    kind = body.get("kind")
    params = body.get("params", {})
    if kind == PIPELINE:
        steps = body.get("steps") or []
        if not steps:
            raise TemplateParamError("pipeline: needs at least one step")
        schema_now = input_schemas[0]
        for step in steps:
            if body_pattern(step) is not DependencyPattern.ONE_TO_ONE:
                raise TemplateParamError("pipeline: every step must be one_to_one")
            schema_now = validate_body(step, [schema_now])
        return schema_now
    if kind not in TEMPLATE_KINDS:
        raise TemplateParamError(f"unknown template kind {kind!r}")
    if len(input_schemas) != NUM_INPUTS[kind]:
        raise TemplateParamError(
            f"{kind}: expects {NUM_INPUTS[kind]} input(s), got {len(input_schemas)}"
        )
    return _VALIDATORS[kind](params, input_schemas)


def _v_project(params: dict, schemas: list[Schema]) -> Schema:
    columns = _need(params, "columns", "project")
    if not isinstance(columns, list) or not columns:
        raise TemplateParamError("project: 'columns' must be a non-empty list")
    declared = {c.name: c for c in _declared(schemas[0])}
    out = []
    for name in columns:
        if name not in declared:
            raise TemplateParamError(f"project: input has no column {name!r}")
        out.append(Column(name, declared[name].type))
    return Schema(out)


def _check_predicate(params: dict, schema_: Schema, kind: str) -> None:
    column = _need(params, "column", kind)
    op = _need(params, "op", kind)
    if op not in COMPARE_OPS:
        raise TemplateParamError(f"{kind}: unknown op {op!r}")
    if not schema_.has_column(column):
        raise TemplateParamError(f"{kind}: input has no column {column!r}")
    if op != "contains" and "value" not in params:
        raise TemplateParamError(f"{kind}: missing parameter 'value'")
    if op == "contains":
        if schema_.column(column).type not in (ValueType.TEXT, ValueType.URI):
            raise TemplateParamError(f"{kind}: 'contains' needs a text column")
        if not isinstance(params.get("value"), str):
            raise TemplateParamError(f"{kind}: 'contains' needs a text value")


def _check_format_guard(params: dict, schema_: Schema, kind: str) -> None:
    uri_column = params.get("uri_column")
    if uri_column is None:
        return
    if not schema_.has_column(uri_column):
        raise TemplateParamError(f"{kind}: input has no column {uri_column!r}")
    formats = params.get("supported_formats")
    if formats is not None and (
        not isinstance(formats, list) or not all(isinstance(f, str) for f in formats)
    ):
        raise TemplateParamError(f"{kind}: 'supported_formats' must be a list of extensions")


def _v_filter(params: dict, schemas: list[Schema]) -> Schema:
    _check_predicate(params, schemas[0], "filter")
    _check_format_guard(params, schemas[0], "filter")
    return Schema(_strip_keys(_declared(schemas[0])))


def _v_classify_boolean(params: dict, schemas: list[Schema]) -> Schema:
    _check_predicate(params, schemas[0], "classify_boolean")
    _check_format_guard(params, schemas[0], "classify_boolean")
    into = _need(params, "into", "classify_boolean")
    cols = _strip_keys(_declared(schemas[0]))
    _fresh_column(into, cols, "classify_boolean")
    return Schema(cols + [Column(into, ValueType.BOOLEAN)])


def _v_keyword_score(params: dict, schemas: list[Schema]) -> Schema:
    text_column = _need(params, "text_column", "keyword_score")
    if not schemas[0].has_column(text_column):
        raise TemplateParamError(f"keyword_score: input has no column {text_column!r}")
    if schemas[0].column(text_column).type not in (ValueType.TEXT, ValueType.URI):
        raise TemplateParamError("keyword_score: 'text_column' must be text")
    keywords = _need(params, "keywords", "keyword_score")
    if not isinstance(keywords, list) or not all(isinstance(k, str) for k in keywords):
        raise TemplateParamError("keyword_score: 'keywords' must be a list of strings")
    if not [k for k in keywords if k.strip()]:
        raise EmptyKeywords("keyword_score: keyword list is empty")
    sep = params.get("sep", " ; ")
    if not isinstance(sep, str) or not sep:
        raise TemplateParamError("keyword_score: 'sep' must be a non-empty string")
    into, cols = _score_into(params, schemas[0], "keyword_score")
    return Schema(cols)


def _v_numeric_score(params: dict, schemas: list[Schema]) -> Schema:
    column = _need(params, "column", "numeric_score")
    if not schemas[0].has_column(column):
        raise TemplateParamError(f"numeric_score: input has no column {column!r}")
    if schemas[0].column(column).type not in (ValueType.INT64, ValueType.FLOAT64):
        raise TemplateParamError("numeric_score: 'column' must be numeric")
    low = _need(params, "low", "numeric_score")
    high = _need(params, "high", "numeric_score")
    if not isinstance(low, (int, float)) or not isinstance(high, (int, float)) or low >= high:
        raise TemplateParamError("numeric_score: needs numeric low < high")
    direction = params.get("direction", "ascending")
    if direction not in ("ascending", "descending"):
        raise TemplateParamError("numeric_score: direction must be ascending or descending")
    scale = params.get("scale", 1.0)
    if not isinstance(scale, (int, float)) or scale <= 0:
        raise TemplateParamError("numeric_score: 'scale' must be positive")
    into, cols = _score_into(params, schemas[0], "numeric_score")
    return Schema(cols)


def _v_combine_scores(params: dict, schemas: list[Schema]) -> Schema:
    columns = _need(params, "columns", "combine_scores")
    weights = _need(params, "weights", "combine_scores")
    if not isinstance(columns, list) or not columns:
        raise TemplateParamError("combine_scores: 'columns' must be a non-empty list")
    if not isinstance(weights, list) or len(weights) != len(columns):
        raise TemplateParamError("combine_scores: 'weights' must match 'columns'")
    for c in columns:
        if not schemas[0].has_column(c):
            raise TemplateParamError(f"combine_scores: input has no column {c!r}")
        if schemas[0].column(c).type is not ValueType.FLOAT64:
            raise TemplateParamError(f"combine_scores: column {c!r} must be float64")
    if not all(isinstance(w, (int, float)) and w >= 0 for w in weights):
        raise TemplateParamError("combine_scores: weights must be non-negative")
    if sum(weights) <= 0:
        raise TemplateParamError("combine_scores: weights must sum to a positive value")
    into, cols = _score_into(params, schemas[0], "combine_scores")
    return Schema(cols)


def _v_equi_join(params: dict, schemas: list[Schema]) -> Schema:
    left, right = schemas
    lcol = _need(params, "left_column", "equi_join")
    rcol = _need(params, "right_column", "equi_join")
    if not left.has_column(lcol):
        raise TemplateParamError(f"equi_join: left input has no column {lcol!r}")
    if not right.has_column(rcol):
        raise TemplateParamError(f"equi_join: right input has no column {rcol!r}")
    lt, rt = left.column(lcol).type, right.column(rcol).type
    joinable = {ValueType.TEXT, ValueType.URI}
    if lt is not rt and not (lt in joinable and rt in joinable):
        raise TemplateParamError(f"equi_join: key types differ ({lt.value} vs {rt.value})")
    right_where = params.get("right_where")
    if right_where is not None:
        _check_predicate(right_where, right, "equi_join.right_where")
    lcols = _strip_keys(_declared(left))
    lnames = {c.name for c in lcols}
    collect = params.get("collect")
    if collect is not None:
        ccol = _need(collect, "column", "equi_join.collect")
        if not right.has_column(ccol):
            raise TemplateParamError(f"equi_join: right input has no column {ccol!r}")
        into = _need(collect, "into", "equi_join.collect")
        _fresh_column(into, lcols, "equi_join")
        sep = collect.get("sep", " ; ")
        if not isinstance(sep, str) or not sep:
            raise TemplateParamError("equi_join: collect 'sep' must be a non-empty string")
        out = lcols + [Column(into, ValueType.TEXT)]
        count_into = collect.get("count_into")
        if count_into is not None:
            _fresh_column(count_into, out, "equi_join")
            out.append(Column(count_into, ValueType.INT64))
        return Schema(out)
    rcols = [c for c in _strip_keys(_declared(right)) if c.name not in lnames]
    return Schema(lcols + rcols)


def _v_similarity_join(params: dict, schemas: list[Schema]) -> Schema:
    left, right = schemas
    lcol = _need(params, "left_column", "similarity_join")
    rcol = _need(params, "right_column", "similarity_join")
    for schema_, col, side in ((left, lcol, "left"), (right, rcol, "right")):
        if not schema_.has_column(col):
            raise TemplateParamError(f"similarity_join: {side} input has no column {col!r}")
        if schema_.column(col).type not in (ValueType.TEXT, ValueType.URI):
            raise TemplateParamError(f"similarity_join: {side} key column must be text")
    threshold = _need(params, "threshold", "similarity_join")
    if not isinstance(threshold, (int, float)) or not (0.0 <= threshold <= 1.0):
        raise TemplateParamError("similarity_join: threshold must lie in [0, 1]")
    lcols = _strip_keys(_declared(left))
    lnames = {c.name for c in lcols}
    rcols = [c for c in _strip_keys(_declared(right)) if c.name not in lnames]
    sim_col = params.get("similarity_into", "similarity")
    _fresh_column(sim_col, lcols + rcols, "similarity_join")
    return Schema(lcols + rcols + [Column(sim_col, ValueType.FLOAT64)])


def _v_sort_rank(params: dict, schemas: list[Schema]) -> Schema:
    by = _need(params, "by", "sort_rank")
    if not isinstance(by, list) or not by:
        raise TemplateParamError("sort_rank: 'by' must be a non-empty list")
    for c in by:
        if not schemas[0].has_column(c):
            raise TemplateParamError(f"sort_rank: input has no column {c!r}")
    descending = params.get("descending", False)
    if isinstance(descending, list):
        if len(descending) != len(by) or not all(isinstance(d, bool) for d in descending):
            raise TemplateParamError("sort_rank: 'descending' list must match 'by'")
    elif not isinstance(descending, bool):
        raise TemplateParamError("sort_rank: 'descending' must be bool or list of bool")
    limit = params.get("limit")
    if limit is not None and (not isinstance(limit, int) or limit < 0):
        raise TemplateParamError("sort_rank: 'limit' must be a non-negative int")
    cols = _strip_keys(_declared(schemas[0]))
    rank_into = params.get("rank_into")
    if rank_into is not None:
        _fresh_column(rank_into, cols, "sort_rank")
        cols = cols + [Column(rank_into, ValueType.INT64)]
    return Schema(cols)


_AGG_FNS = ("count", "sum", "min", "max", "mean", "concat")


def _v_group_aggregate(params: dict, schemas: list[Schema]) -> Schema:
    group_by = _need(params, "group_by", "group_aggregate")
    if not isinstance(group_by, list) or not group_by:
        raise TemplateParamError("group_aggregate: 'group_by' must be a non-empty list")
    declared = {c.name: c for c in _declared(schemas[0])}
    out = []
    for name in group_by:
        if name not in declared:
            raise TemplateParamError(f"group_aggregate: input has no column {name!r}")
        out.append(Column(name, declared[name].type))
    aggs = _need(params, "aggregations", "group_aggregate")
    if not isinstance(aggs, list) or not aggs:
        raise TemplateParamError("group_aggregate: 'aggregations' must be a non-empty list")
    for agg in aggs:
        fn = _need(agg, "fn", "group_aggregate")
        if fn not in _AGG_FNS:
            raise TemplateParamError(f"group_aggregate: unknown aggregation {fn!r}")
        column = _need(agg, "column", "group_aggregate")
        if column != "*" and column not in declared:
            raise TemplateParamError(f"group_aggregate: input has no column {column!r}")
        if column == "*" and fn != "count":
            raise TemplateParamError("group_aggregate: '*' only combines with count")
        into = _need(agg, "into", "group_aggregate")
        _fresh_column(into, out, "group_aggregate")
        if fn == "count":
            out_type = ValueType.INT64
        elif fn == "mean":
            out_type = ValueType.FLOAT64
        elif fn == "concat":
            out_type = ValueType.TEXT
        elif fn == "sum":
            src = declared[column].type
            if src not in (ValueType.INT64, ValueType.FLOAT64):
                raise TemplateParamError("group_aggregate: sum needs a numeric column")
            out_type = src
        else:  # min / max
            out_type = declared[column].type
        if fn in ("sum", "mean") and declared.get(column) is not None:
            if column != "*" and declared[column].type not in (ValueType.INT64, ValueType.FLOAT64):
                raise TemplateParamError(f"group_aggregate: {fn} needs a numeric column")
        out.append(Column(into, out_type))
    return Schema(out)


def _v_populate_view(params: dict, schemas: list[Schema]) -> Schema:
    json_column = _need(params, "json_column", "populate_view")
    if not schemas[0].has_column(json_column):
        raise TemplateParamError(f"populate_view: input has no column {json_column!r}")
    if schemas[0].column(json_column).type not in (ValueType.TEXT, ValueType.URI):
        raise TemplateParamError("populate_view: 'json_column' must be text")
    items_field = _need(params, "items_field", "populate_view")
    if not isinstance(items_field, str) or not items_field:
        raise TemplateParamError("populate_view: 'items_field' must be a field name")
    fields = _need(params, "fields", "populate_view")
    if not isinstance(fields, list) or not fields:
        raise TemplateParamError("populate_view: 'fields' must be a non-empty list")
    copy = params.get("copy", [])
    declared = {c.name: c for c in _declared(schemas[0])}
    out = []
    for name in copy:
        if name not in declared:
            raise TemplateParamError(f"populate_view: input has no column {name!r}")
        out.append(Column(name, declared[name].type))
    for spec in fields:
        if not isinstance(spec, (list, tuple)) or len(spec) != 2:
            raise TemplateParamError("populate_view: each field is a [name, type] pair")
        name, vt = spec
        _fresh_column(name, out, "populate_view")
        out.append(Column(name, ValueType.parse(vt)))
    return Schema(out)


_VALIDATORS: dict[str, Callable[[dict, list[Schema]], Schema]] = {
    "project": _v_project,
    "filter": _v_filter,
    "equi_join": _v_equi_join,
    "similarity_join": _v_similarity_join,
    "keyword_score": _v_keyword_score,
    "numeric_score": _v_numeric_score,
    "combine_scores": _v_combine_scores,
    "classify_boolean": _v_classify_boolean,
    "sort_rank": _v_sort_rank,
    "group_aggregate": _v_group_aggregate,
    "populate_view": _v_populate_view,
}


# ---------------------------------------------------------------------------
# execution: shared pieces


def _compare(op: str, left: Any, right: Any) -> bool:
    """Predicate evaluation; null never satisfies any predicate."""
    if left is None or right is None:
        return False
    if op == "contains":
        return isinstance(left, str) and isinstance(right, str) and right in left
    if op == "==":
        return left == right
    if op == "!=":
        return left != right
    if op == "<":
        return left < right
    if op == "<=":
        return left <= right
    if op == ">":
        return left > right
    if op == ">=":
        return left >= right
    raise TemplateParamError(f"unknown op {op!r}")


def _format_guard(params: dict, row: dict) -> None:
    """Simulates decoding a media file; unsupported containers fail mid-stream
    unless the body was patched to normalize them first."""
    uri_column = params.get("uri_column")
    if not uri_column:
        return
    supported = params.get("supported_formats")
    if not supported or params.get("normalize_formats", False):
        return
    uri = row.get(uri_column)
    if uri is None:
        return
    ext = os.path.splitext(str(uri))[1].lower()
    if ext not in [f.lower() for f in supported]:
        raise ValueError(f"unsupported image format {ext!r} in {uri!r}")


def keyword_score_value(
    text: Any, keywords: list[str], sep: str, embedder: Embedder
) -> float:
    """Mean over entities of the best keyword cosine, mapped to [0, 1].

    The text cell holds entity labels separated by ``sep``. A null or
    entity-free cell scores 0.0. A perfect match (every entity identical to
    some keyword) scores exactly 1.0.
    """
    entities = [] if text is None else [p.strip() for p in str(text).split(sep) if p.strip()]
    if not entities:
        return 0.0
    e = embedder.embed(entities)
    k = embedder.embed(keywords)
    m = cosine_matrix(e, k)
    best = m.max(axis=1)
    mean = float(np.sum(best) / len(best))
    return (mean + 1.0) / 2.0


# ---------------------------------------------------------------------------
# execution: narrow kinds (one row in, zero or more rows out)


def apply_row(body: dict, row: dict, ctx: TemplateContext) -> list[dict]:
    kind = body["kind"]
    params = body.get("params", {})
    if kind == PIPELINE:
        rows = [row]
        for step in body["steps"]:
            rows = [out for r in rows for out in apply_row(step, r, ctx)]
        return rows
    if kind == "project":
        return [{name: row.get(name) for name in params["columns"]}]
    if kind == "filter":
        _format_guard(params, row)
        keep = _compare(params["op"], row.get(params["column"]), params.get("value"))
        return [dict(row)] if keep else []
    if kind == "classify_boolean":
        _format_guard(params, row)
        flag = _compare(params["op"], row.get(params["column"]), params.get("value"))
        return [dict(row) | {params["into"]: flag}]
    if kind == "keyword_score":
        score = keyword_score_value(
            row.get(params["text_column"]),
            params["keywords"],
            params.get("sep", " ; "),
            ctx.embedder,
        )
        return [dict(row) | {params["into"]: score}]
    if kind == "numeric_score":
        value = row.get(params["column"])
        low, high = float(params["low"]), float(params["high"])
        if value is None:
            score = 0.0
        else:
            clamped = min(max(float(value), low), high)
            score = (clamped - low) / (high - low)
            if params.get("direction", "ascending") == "descending":
                score = 1.0 - score
        score *= float(params.get("scale", 1.0))
        return [dict(row) | {params["into"]: score}]
    if kind == "combine_scores":
        weights = [float(w) for w in params["weights"]]
        total = sum(weights)
        acc = 0.0
        for column, weight in zip(params["columns"], weights):
            value = row.get(column)
            acc += weight * (float(value) if value is not None else 0.0)
        return [dict(row) | {params["into"]: acc / total}]
    if kind == "populate_view":
        doc = json.loads(row.get(params["json_column"]) or "")
        items = doc.get(params["items_field"])
        if not isinstance(items, list):
            raise ValueError(f"annotation field {params['items_field']!r} is not a list")
        out = []
        base = {name: row.get(name) for name in params.get("copy", [])}
        for item in items:
            if not isinstance(item, dict):
                raise ValueError("annotation items must be objects")
            produced = dict(base)
            for name, vt in params["fields"]:
                produced[name] = check_value(ValueType.parse(vt), item.get(name))
            out.append(produced)
        return out
    raise TemplateParamError(f"{kind!r} is not a narrow template kind")


# ---------------------------------------------------------------------------
# execution: wide kinds (whole tables in, rows out)


def _row_values(schema_: Schema, row: dict) -> dict:
    return {c.name: row.get(c.name) for c in _declared(schema_)}


def apply_table(
    body: dict, tables: list[tuple[Schema, list[dict]]], ctx: TemplateContext
) -> list[dict]:
    kind = body["kind"]
    params = body.get("params", {})
    if kind == "equi_join":
        return _run_equi_join(params, tables)
    if kind == "similarity_join":
        return _run_similarity_join(params, tables, ctx)
    if kind == "sort_rank":
        return _run_sort_rank(params, tables)
    if kind == "group_aggregate":
        return _run_group_aggregate(params, tables)
    raise TemplateParamError(f"{kind!r} is not a wide template kind")


def _run_equi_join(params: dict, tables: list[tuple[Schema, list[dict]]]) -> list[dict]:
    (lschema, lrows), (rschema, rrows) = tables
    lcol, rcol = params["left_column"], params["right_column"]
    right_where = params.get("right_where")
    if right_where is not None:
        rrows = [
            r
            for r in rrows
            if _compare(right_where["op"], r.get(right_where["column"]), right_where.get("value"))
        ]
    index: dict[Any, list[dict]] = {}
    for r in rrows:
        key = r.get(rcol)
        if key is not None:
            index.setdefault(key, []).append(r)
    collect = params.get("collect")
    out: list[dict] = []
    if collect is not None:
        ccol, into = collect["column"], collect["into"]
        sep = collect.get("sep", " ; ")
        count_into = collect.get("count_into")
        for lrow in lrows:
            matches = index.get(lrow.get(lcol), [])
            values = sorted(str(m[ccol]) for m in matches if m.get(ccol) is not None)
            produced = _row_values(lschema, lrow)
            produced[into] = sep.join(values)
            if count_into is not None:
                produced[count_into] = len(matches)
            out.append(produced)
        return out
    lnames = {c.name for c in _declared(lschema)}
    rkeep = [c.name for c in _declared(rschema) if c.name not in lnames]
    for lrow in lrows:
        for match in index.get(lrow.get(lcol), []):
            produced = _row_values(lschema, lrow)
            for name in rkeep:
                produced[name] = match.get(name)
            out.append(produced)
    return out


def _run_similarity_join(
    params: dict, tables: list[tuple[Schema, list[dict]]], ctx: TemplateContext
) -> list[dict]:
    (lschema, lrows), (rschema, rrows) = tables
    lcol, rcol = params["left_column"], params["right_column"]
    threshold = float(params["threshold"])
    lidx = [i for i, r in enumerate(lrows) if r.get(lcol) is not None]
    ridx = [j for j, r in enumerate(rrows) if r.get(rcol) is not None]
    pairs: list[tuple[float, int, int]] = []
    if lidx and ridx:
        lvecs = ctx.embedder.embed([str(lrows[i][lcol]) for i in lidx])
        rvecs = ctx.embedder.embed([str(rrows[j][rcol]) for j in ridx])
        sims = cosine_matrix(lvecs, rvecs)
        for a, i in enumerate(lidx):
            for b, j in enumerate(ridx):
                sim = float(sims[a, b])
                if sim >= threshold:
                    pairs.append((sim, i, j))
    if params.get("one_to_one", True):
        # Greedy best-first matching; ties break on (left lid, right lid).
        ordered = sorted(
            pairs,
            key=lambda p: (-p[0], lrows[p[1]].get("lid", p[1]), rrows[p[2]].get("lid", p[2])),
        )
        used_left: set[int] = set()
        used_right: set[int] = set()
        chosen = []
        for sim, i, j in ordered:
            if i in used_left or j in used_right:
                continue
            used_left.add(i)
            used_right.add(j)
            chosen.append((sim, i, j))
        pairs = chosen
    pairs.sort(key=lambda p: (p[1], p[2]))
    lnames = {c.name for c in _declared(lschema)}
    rkeep = [c.name for c in _declared(rschema) if c.name not in lnames]
    sim_col = params.get("similarity_into", "similarity")
    out = []
    for sim, i, j in pairs:
        produced = _row_values(lschema, lrows[i])
        for name in rkeep:
            produced[name] = rrows[j].get(name)
        produced[sim_col] = sim
        out.append(produced)
    return out


def _run_sort_rank(params: dict, tables: list[tuple[Schema, list[dict]]]) -> list[dict]:
    (schema_, rows) = tables[0]
    by = params["by"]
    descending = params.get("descending", False)
    flags = descending if isinstance(descending, list) else [descending] * len(by)
    # Stable multi-key sort: seed with lid order, then sort by each key from
    # the least significant to the most. Nulls always sort last.
    ordered = sorted(rows, key=lambda r: r.get("lid", 0))
    for column, desc in zip(reversed(by), reversed(flags)):
        non_null = [r for r in ordered if r.get(column) is not None]
        nulls = [r for r in ordered if r.get(column) is None]
        non_null.sort(key=lambda r: r[column], reverse=desc)
        ordered = non_null + nulls
    limit = params.get("limit")
    if limit is not None:
        ordered = ordered[:limit]
    rank_into = params.get("rank_into")
    out = []
    for pos, row in enumerate(ordered, start=1):
        produced = _row_values(schema_, row)
        if rank_into is not None:
            produced[rank_into] = pos
        out.append(produced)
    return out


def _run_group_aggregate(params: dict, tables: list[tuple[Schema, list[dict]]]) -> list[dict]:
    (schema_, rows) = tables[0]
    group_by = params["group_by"]
    groups: dict[tuple, list[dict]] = {}
    order: list[tuple] = []
    for row in rows:
        key = tuple(row.get(c) for c in group_by)
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(row)
    out = []
    for key in order:
        members = groups[key]
        produced = dict(zip(group_by, key))
        for agg in params["aggregations"]:
            fn, column, into = agg["fn"], agg["column"], agg["into"]
            if column == "*":
                values = members
            else:
                values = [m.get(column) for m in members if m.get(column) is not None]
            if fn == "count":
                produced[into] = len(values)
            elif fn == "sum":
                produced[into] = sum(values) if values else None
            elif fn == "min":
                produced[into] = min(values) if values else None
            elif fn == "max":
                produced[into] = max(values) if values else None
            elif fn == "mean":
                produced[into] = (float(sum(values)) / len(values)) if values else None
            elif fn == "concat":
                produced[into] = " ; ".join(sorted(str(v) for v in values))
        out.append(produced)
    return out


# ---------------------------------------------------------------------------
# metadata consumed by the runtime monitor


def score_ranges(body: dict) -> dict[str, tuple[float, float]]:
    """Columns whose values the body declares to lie in a fixed range."""
    kind = body.get("kind")
    if kind == PIPELINE:
        merged: dict[str, tuple[float, float]] = {}
        for step in body.get("steps", []):
            merged.update(score_ranges(step))
        return merged
    if kind in ("keyword_score", "numeric_score", "combine_scores"):
        into = body.get("params", {}).get("into")
        if into:
            return {into: (0.0, 1.0)}
    return {}
