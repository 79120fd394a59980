import re
from typing import Sequence

PAD, BOS, EOS, SEP, UNK = "PAD", "BOS", "EOS", "SEP", "UNK"
ROW, COL, CELL, TAB = "[ROW]", "[COL]", "[CELL]", "[TAB]"
MAX_INDEXED_ROWS = 64
MAX_COLUMNS = 16

DIGITS = tuple(str(d) for d in range(10))
KEYWORDS = ("select", "where", "from", "table", "and", "or", "in", "limit", "=", "!=", "(", ")", ",")
COLUMN_NAMES = tuple(f"c{i}" for i in range(1, MAX_COLUMNS + 1))

_WORD = re.compile(r"!=|=|\(|\)|,|[^\s(),=!]+")


def indexed_row(n: int) -> str:
    return f"[ROW {n}]"


class Vocabulary:
    """Closed symbol set with contiguous ids; PAD is 0."""

    def __init__(self, symbols: Sequence[str]):
        if len(set(symbols)) != len(symbols):
            raise ValueError("vocabulary symbols must be unique")
        self._symbols = tuple(symbols)
        self._ids = {s: i for i, s in enumerate(self._symbols)}

    @classmethod
    def default(cls) -> "Vocabulary":
        specials = [PAD, BOS, EOS, SEP, ROW, *(indexed_row(n) for n in range(1, MAX_INDEXED_ROWS + 1)),
                    COL, CELL, TAB]
        return cls([*specials, *DIGITS, *KEYWORDS, *COLUMN_NAMES, UNK])

    def __len__(self) -> int:
        return len(self._symbols)

    def __contains__(self, symbol: str) -> bool:
        return symbol in self._ids

    @property
    def symbols(self) -> tuple[str, ...]:
        return self._symbols

    def id(self, symbol: str) -> int:
        return self._ids.get(symbol, self._ids[UNK])

    def symbol(self, token_id: int) -> str:
        return self._symbols[token_id]

    def tokenize(self, text: str) -> tuple[list[str], int]:
        """Split text into vocabulary symbols; returns (symbols, number of UNK substitutions).

        Keywords and column names match case-insensitively, integers split into digits.
        """
        out: list[str] = []
        unknown = 0
        for word in _WORD.findall(text):
            lowered = word.lower()
            if lowered in self._ids and lowered not in (PAD, BOS, EOS, UNK):
                out.append(lowered)
            elif word.isdigit() and word.isascii():
                out.extend(word)
            else:
                out.append(UNK)
                unknown += 1
        return out, unknown

    def encode_answer(self, values: Sequence[str]) -> tuple[list[int], int]:
        """Decoder target: BOS, values joined by SEP, EOS."""
        ids = [self.id(BOS)]
        unknown = 0
        for n, value in enumerate(values):
            if n:
                ids.append(self.id(SEP))
            symbols, unk = self.tokenize(value)
            unknown += unk
            ids.extend(self.id(s) for s in symbols)
        ids.append(self.id(EOS))
        return ids, unknown

    def decode_answer(self, ids: Sequence[int]) -> tuple[str, ...]:
        """Inverse of encode_answer; stops at EOS, splits on SEP, joins digits of a value."""
        values: list[str] = []
        current: list[str] = []
        started = False
        for token_id in ids:
            sym = self.symbol(int(token_id))
            if sym == BOS and not started:
                started = True
                continue
            started = True
            if sym in (EOS, PAD):
                break
            if sym == SEP:
                values.append(self._join(current))
                current = []
            else:
                current.append(sym)
        if current or values:
            values.append(self._join(current))
        return tuple(values)

    @staticmethod
    def _join(symbols: list[str]) -> str:
        if all(s in DIGITS for s in symbols):
            return "".join(symbols)
        return " ".join(symbols)


VOCAB = Vocabulary.default()
