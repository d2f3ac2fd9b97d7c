import pytest

from facepers import prompts
from facepers.errors import InvalidPromptError


def test_positive_prompt_tokens():
    tok = prompts.tokenize(prompts.POSITIVE_PROMPT).tolist()
    assert tok[-1] == prompts.EOT and tok.count(prompts.EOT) == 1
    assert tok.count(prompts.STAR) == 1
    assert prompts.UNK not in tok


def test_negative_prompt_has_no_star():
    tok = prompts.tokenize(prompts.NEGATIVE_PROMPT)
    assert prompts.star_index(tok) is None
    assert prompts.UNK not in tok.tolist()


def test_two_stars_rejected():
    with pytest.raises(InvalidPromptError):
        prompts.tokenize("* and *")


def test_validate_requires_star_when_asked():
    with pytest.raises(InvalidPromptError):
        prompts.validate(prompts.tokenize("a photo"), require_star=True)


def test_validate_rejects_missing_eot():
    with pytest.raises(InvalidPromptError):
        prompts.validate(prompts.tokenize("a photo")[:-1])


def test_unknown_words_map_to_unk():
    assert prompts.tokenize("zebra").tolist() == [prompts.UNK, prompts.EOT]
