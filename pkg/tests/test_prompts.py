import numpy as np
import pytest

from dyngate.errors import FormatError, ParseError, UnknownDomainError, ValidationError
from dyngate.prompts import PromptBank, embed, expand_template, load_embeddings


@pytest.mark.parametrize("scene, expected", [
    ("day foggy", "an image taken in day foggy"),
    ("photo", "an image taken in photo"),
])
def test_expand_template(scene, expected):
    assert expand_template(scene) == expected


def test_expand_template_empty():
    with pytest.raises(ValidationError):
        expand_template("")


def test_embed_deterministic():
    a = embed("an image taken in photo", 32, 8, 7)
    b = embed("an image taken in photo", 32, 8, 7)
    assert a.tobytes() == b.tobytes()
    assert a.shape == (8, 32)


def test_embed_differs_between_scenes():
    a = embed("an image taken in photo")
    b = embed("an image taken in sketch")
    assert np.any(np.any(a != b, axis=1))


def test_embed_unit_rows():
    for text in ["an image taken in photo", "x", "a b c d e f g h i j k"]:
        m = embed(text, 16, 5, 3)
        assert np.allclose(np.linalg.norm(m, axis=1), 1.0, rtol=0, atol=1e-12)


def test_embed_preconditions():
    with pytest.raises(ValidationError):
        embed("x", d_text=4)
    with pytest.raises(ValidationError):
        embed("x", tokens=0)


def test_embed_pure_no_order_dependence():
    first = embed("an image taken in night", seed=1)
    embed("an image taken in cartoon", seed=2)
    assert np.array_equal(first, embed("an image taken in night", seed=1))


def test_seed_changes_embeddings():
    for scene in ["photo", "sketch", "cartoon", "night"]:
        t = expand_template(scene)
        assert not np.array_equal(embed(t, seed=0), embed(t, seed=1))


def _write(tmp_path, text):
    p = tmp_path / "emb.txt"
    p.write_text(text)
    return p


def test_load_single_entry(tmp_path):
    vals = " ".join(str(v) for v in np.arange(1.0, 9.0))
    table = load_embeddings(_write(tmp_path, f"# comment\nphoto\t{vals}\n"), d_text=8)
    assert list(table) == ["photo"]
    assert np.allclose(np.linalg.norm(table["photo"], axis=1), 1.0)


def test_load_empty_file(tmp_path):
    assert load_embeddings(_write(tmp_path, "")) == {}


def test_load_zero_row(tmp_path):
    with pytest.raises(FormatError):
        load_embeddings(_write(tmp_path, "photo\t" + " ".join(["0"] * 8) + "\n"), d_text=8)


def test_load_malformed_line_reports_number(tmp_path):
    with pytest.raises(ParseError, match="line 2"):
        load_embeddings(_write(tmp_path, "photo\t" + " 1" * 8 + "\nsketch 1 2 3\n"), d_text=8)
    with pytest.raises(ParseError, match="line 1"):
        load_embeddings(_write(tmp_path, "photo\t1 2 x 4 5 6 7 8\n"), d_text=8)


def test_load_inconsistent_dims(tmp_path):
    with pytest.raises(FormatError):
        load_embeddings(_write(tmp_path, "a\t" + " 1" * 8 + "\nb\t" + " 1" * 16 + "\n"), d_text=8)


def test_bank_strict_and_fallback(tmp_path):
    vals = " ".join(["0.5"] * 16)
    bank = PromptBank.from_file(_write(tmp_path, f"photo\t{vals}\n"), d_text=8, tokens=2)
    assert bank.get("photo").shape == (2, 8)
    with pytest.raises(UnknownDomainError):
        bank.get("sketch", strict=True)
    assert np.array_equal(bank.get("sketch"), bank.fallback())


def test_bank_hashed_matches_embed():
    bank = PromptBank(32, 8, seed=4)
    assert np.array_equal(bank.get("night"), embed("an image taken in night", 32, 8, 4))
    with pytest.raises(UnknownDomainError):
        PromptBank(known=["photo"]).get("sketch", strict=True)
