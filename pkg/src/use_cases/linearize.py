import logging

import numpy as np

from src.domain.encoding import HEADER_ROW, EncodedInput, TokenRole
from src.domain.models import PositionScheme, SequenceTooLongError, Table, TableShapeError, TokenScheme

from .vocabulary import CELL, COL, MAX_INDEXED_ROWS, ROW, SEP, TAB, UNK, VOCAB, Vocabulary, indexed_row

logger = logging.getLogger(__name__)

DEFAULT_CONTEXT = 512


class _SequenceBuilder:
    """Accumulates tokens with all their index channels."""

    def __init__(self, vocab: Vocabulary):
        self.vocab = vocab
        self.symbols: list[str] = []
        self.roles: list[int] = []
        self.rows: list[int] = []
        self.cols: list[int] = []
        self.ords: list[int] = []
        self.segments: list[int] = []
        self.unknown = 0

    def token(self, symbol: str, role: TokenRole, row: int = 0, col: int = 0, ord_: int = 0,
              segment: int = 1) -> None:
        self.symbols.append(symbol)
        self.roles.append(int(role))
        self.rows.append(row)
        self.cols.append(col)
        self.ords.append(ord_)
        self.segments.append(segment)

    def cell(self, text: str, row: int, col: int) -> None:
        symbols, unknown = self.vocab.tokenize(text)
        if not symbols:
            symbols, unknown = [UNK], 1
        self.unknown += unknown
        for k, symbol in enumerate(symbols):
            self.token(symbol, TokenRole.CELL_CONTENT, row, col, k)

    def build(self, scheme: TokenScheme, table: Table) -> EncodedInput:
        return EncodedInput(
            token_ids=[self.vocab.id(s) for s in self.symbols],
            symbols=tuple(self.symbols),
            roles=self.roles,
            row_idx=self.rows,
            col_idx=self.cols,
            cell_ord=self.ords,
            segment=self.segments,
            tokens=scheme,
            n_rows=table.n_rows,
            n_cols=table.n_cols,
            unk_count=self.unknown,
        )


def linearize(question: str, table: Table, scheme: TokenScheme, vocab: Vocabulary = VOCAB,
              max_length: int = DEFAULT_CONTEXT) -> EncodedInput:
    """Flatten a question and a table into one token sequence, rows concatenated in order.

    Layout after ``question SEP``:
      T0: header cells, then data cells, consecutive cells separated by SEP
      T1: header cells, then per row ``[ROW r]`` and per cell ``[CELL]`` + content
      T2: ``[TAB]``, per column ``[COL]`` + header, per row ``[ROW]`` and per cell ``[CELL]`` + content
    """
    if scheme is TokenScheme.T1 and table.n_rows > MAX_INDEXED_ROWS:
        raise TableShapeError(f"T1 has indexed row tokens for {MAX_INDEXED_ROWS} rows, table has {table.n_rows}")

    seq = _SequenceBuilder(vocab)
    question_symbols, unknown = vocab.tokenize(question)
    seq.unknown += unknown
    for k, symbol in enumerate(question_symbols):
        seq.token(symbol, TokenRole.QUESTION, ord_=0, segment=0)
    seq.token(SEP, TokenRole.BOUNDARY, segment=0)

    if scheme is TokenScheme.T0:
        cells = [(h, HEADER_ROW, c + 1) for c, h in enumerate(table.headers)]
        cells += [(v, r + 1, c + 1) for r, row in enumerate(table.rows) for c, v in enumerate(row)]
        for n, (text, r, c) in enumerate(cells):
            if n:
                seq.token(SEP, TokenRole.BOUNDARY)
            seq.cell(text, r, c)
    elif scheme is TokenScheme.T1:
        for c, header in enumerate(table.headers):
            seq.cell(header, HEADER_ROW, c + 1)
        for r, row in enumerate(table.rows, start=1):
            seq.token(indexed_row(r), TokenRole.ROW_TOK, row=r)
            for c, value in enumerate(row, start=1):
                seq.token(CELL, TokenRole.CELL_TOK, row=r, col=c)
                seq.cell(value, r, c)
    else:
        seq.token(TAB, TokenRole.TABLE_TOK)
        for c, header in enumerate(table.headers, start=1):
            seq.token(COL, TokenRole.COL_TOK, row=HEADER_ROW, col=c)
            seq.cell(header, HEADER_ROW, c)
        for r, row in enumerate(table.rows, start=1):
            seq.token(ROW, TokenRole.ROW_TOK, row=r)
            for c, value in enumerate(row, start=1):
                seq.token(CELL, TokenRole.CELL_TOK, row=r, col=c)
                seq.cell(value, r, c)

    if len(seq.symbols) > max_length:
        raise SequenceTooLongError(len(seq.symbols), max_length)
    if seq.unknown:
        logger.warning("substituted UNK for out-of-vocabulary symbols", extra={"unk_count": seq.unknown})
    return seq.build(scheme, table)


def assign_positions(enc: EncodedInput, scheme: PositionScheme) -> EncodedInput:
    """Fill pos_idx: global enumeration (TPE) or per-run restarting indices (CPE)."""
    length = len(enc)
    if scheme is PositionScheme.TPE:
        return enc.with_positions(np.arange(length), scheme)
    # Question is one run; structural and boundary tokens restart at 0; cell content counts within its cell.
    pos = np.where(enc.roles == TokenRole.CELL_CONTENT, enc.cell_ord, 0)
    question = enc.roles == TokenRole.QUESTION
    pos = np.where(question, np.cumsum(question) - 1, pos)
    return enc.with_positions(pos, scheme)


def encode(question: str, table: Table, tokens: TokenScheme, pe: PositionScheme,
           vocab: Vocabulary = VOCAB, max_length: int = DEFAULT_CONTEXT) -> EncodedInput:
    return assign_positions(linearize(question, table, tokens, vocab, max_length), pe)


def table_dims(enc: EncodedInput) -> tuple[int, int]:
    """Recover (R, C) from the role and coordinate channels alone."""
    content = enc.roles == TokenRole.CELL_CONTENT
    return int(enc.row_idx[content].max()), int(enc.col_idx[content].max())


def to_tsv(enc: EncodedInput) -> str:
    lines = ["index\tsymbol\trole\trow\tcol\tcell_ord\tsegment\tpos"]
    pos = enc.pos_idx if enc.pos_idx is not None else [""] * len(enc)
    for i in range(len(enc)):
        lines.append("\t".join(str(v) for v in (
            i, enc.symbols[i], TokenRole(int(enc.roles[i])).name, enc.row_idx[i], enc.col_idx[i],
            enc.cell_ord[i], enc.segment[i], pos[i],
        )))
    return "\n".join(lines) + "\n"
