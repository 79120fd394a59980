"""SQL query templates and their expansion against a table.

A template is written the way the query families are usually listed: words joined by
``|`` are alternatives chosen uniformly, and angle-bracket slots are bound to the
table being queried:

    <cx>            projected column (any column)
    <cy> <cz> ...   condition columns, pairwise distinct
    <vy> <vz> ...   a value of the matching condition column
    <in_vy> ...     1 to 3 values of the matching condition column, comma separated
    <k>             LIMIT count in {1, 2, 3}

Expanded text is parsed and rendered back, so every emitted query is in canonical form.
"""
import logging
from dataclasses import dataclass

import numpy as np

from src.domain.models import GenerationError, Table

from .sqlexec import parse_sql

logger = logging.getLogger(__name__)

LIMIT_CHOICES = ("1", "2", "3")
MAX_RETRIES = 10
UNIVERSE = 1000


@dataclass(frozen=True)
class Template:
    id: str
    pattern: str
    training: bool

    @property
    def condition_slots(self) -> tuple[str, ...]:
        slots = []
        for word in self.pattern.split():
            if word.startswith("<c") and word != "<cx>" and word not in slots:
                slots.append(word)
        return tuple(slots)


_TEMPLATES = (
    Template("where4", "select <cx> where <cy> =|!= <vy> and|or <cz> =|!= <vz> and|or <cw> =|!= <vw> "
                       "and|or <cl> =|!= <vl>", True),
    Template("where3", "select <cx> where <cy> =|!= <vy> and|or <cz> =|!= <vz> and|or <cw> =|!= <vw>", True),
    Template("where2", "select <cx> where <cy> =|!= <vy> and|or <cz> =|!= <vz>", True),
    Template("where1", "select <cx> where <cy> =|!= <vy>", True),
    Template("select", "select <cx>", True),
    Template("select_limit", "select <cx> limit <k>", True),
    Template("select_subquery", "select <cx> where <cy> = ( select <cy> where <cy> = <vy> )", True),
    Template("select_in", "select <cx> where <cy> in ( <in_vy> )", True),
    Template("select_from", "select <cx> from table", True),
    Template("select_from_where1", "select <cx> from table where <cy> =|!= <vy>", True),
    Template("in_limit", "select <cx> where <cy> in ( <in_vy> ) limit <k>", False),
    Template("where1_limit", "select <cx> where <cy> =|!= <vy> limit <k>", False),
    Template("where_in", "select <cx> where <cy> =|!= <vy> and|or <cz> in ( <in_vz> )", False),
    Template("where1_eq", "select <cx> where <cy> = <vy>", False),
)

TEMPLATES = {t.id: t for t in _TEMPLATES}
TRAINING_TEMPLATES = tuple(t.id for t in _TEMPLATES if t.training)
COMPOSITIONAL_TEMPLATES = ("in_limit", "where1_limit", "where_in")


@dataclass(frozen=True)
class TemplateInstance:
    template_id: str
    query: str


def _choice(rng: np.random.Generator, options):
    return options[int(rng.integers(len(options)))]


def _values_of(table: Table, col: int, rng: np.random.Generator, adversarial: bool) -> str:
    if adversarial:
        return str(int(rng.integers(UNIVERSE)))
    return _choice(rng, table.column_values(col))


def expand(template: Template, table: Table, rng: np.random.Generator, adversarial: bool = False) -> str:
    """Fill every slot and alternative of a template; raises GenerationError if the table is too narrow."""
    slots = template.condition_slots
    if len(slots) > table.n_cols:
        raise GenerationError(f"template {template.id} needs {len(slots)} distinct columns, "
                              f"table has {table.n_cols}")
    picked = rng.permutation(table.n_cols)[:len(slots)]
    columns = {slot: int(c) for slot, c in zip(slots, picked)}
    columns["<cx>"] = int(rng.integers(table.n_cols))

    words = []
    for word in template.pattern.split():
        if word in columns:
            words.append(table.headers[columns[word]])
        elif word.startswith("<v"):
            words.append(_values_of(table, columns["<c" + word[2:]], rng, adversarial))
        elif word.startswith("<in_v"):
            col = columns["<c" + word[5:]]
            size = int(rng.integers(1, 4))
            words.append(", ".join(_values_of(table, col, rng, adversarial) for _ in range(size)))
        elif word == "<k>":
            words.append(_choice(rng, LIMIT_CHOICES))
        elif "|" in word:
            words.append(_choice(rng, word.split("|")))
        else:
            words.append(word)
    return parse_sql(" ".join(words)).to_sql()


def draw_query(template_id: str, table: Table, rng: np.random.Generator, pool: tuple[str, ...] = (),
               adversarial: bool = False) -> TemplateInstance:
    """Expand a template, falling back to other templates of the pool when the table is too narrow."""
    current = template_id
    for attempt in range(MAX_RETRIES + 1):
        try:
            return TemplateInstance(current, expand(TEMPLATES[current], table, rng, adversarial))
        except GenerationError as exc:
            if not pool or attempt == MAX_RETRIES:
                raise GenerationError(f"{exc} (after {attempt} retries)") from None
            logger.debug("retrying with another template", extra={"template": current})
            current = _choice(rng, pool)
    raise GenerationError("unreachable")


def instantiate_template(template_id: str, table: Table, rng: np.random.Generator, pool: tuple[str, ...] = (),
                         adversarial: bool = False) -> str:
    if template_id not in TEMPLATES:
        raise GenerationError(f"unknown template {template_id!r}")
    return draw_query(template_id, table, rng, pool, adversarial).query
