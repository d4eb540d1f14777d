"""Tokenisation shared by retrieval, features and ROUGE."""
import re

_TOKEN = re.compile(r"\w+", re.UNICODE)


def tokenize(text: str) -> list:
    """Lower-cased word tokens with punctuation removed."""
    return _TOKEN.findall(text.lower())


def truncate_words(text: str, max_words: int = 60) -> str:
    words = text.split()
    if len(words) <= max_words:
        return text
    return " ".join(words[:max_words])


_PIECE = re.compile(r"\w{1,4}|[^\w\s]", re.UNICODE)


def token_pieces(text: str) -> list:
    """Rough subword split: word characters in chunks of four, punctuation alone."""
    return _PIECE.findall(text)


def count_tokens(text: str) -> int:
    return len(token_pieces(text))
