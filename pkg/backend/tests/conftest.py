"""Builds a tiny self-contained BERT checkpoint so tests never touch the
network: a WordPiece tokenizer over a toy vocabulary plus seeded random
weights (one layer, hidden size 32)."""

import sys

import pytest

WORDS = [
    "the", "a", "cat", "dog", "bird", "sat", "ran", "slept", "on", "under",
    "mat", "rug", "tree", "house", "fast", "slow", "big", "small", "and",
    "but", "very", "quite", "news", "story", "press",
]
PIECES = ["##s", "##ing", "##ed"]
SPECIALS = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]

# wide enough for the 3-label conformance probe, narrow enough to exercise
# the too-many-labels refusal
HEAD_WIDTH = 8


@pytest.fixture(scope="session")
def tiny_checkpoint(tmp_path_factory):
    import torch
    from tokenizers import Tokenizer, models, normalizers, pre_tokenizers
    from tokenizers.processors import TemplateProcessing
    from transformers import BertConfig, BertForMaskedLM, PreTrainedTokenizerFast

    vocab_list = SPECIALS + WORDS + PIECES
    vocab = {token: i for i, token in enumerate(vocab_list)}
    backend = Tokenizer(models.WordPiece(vocab=vocab, unk_token="[UNK]"))
    backend.normalizer = normalizers.BertNormalizer(lowercase=True)
    backend.pre_tokenizer = pre_tokenizers.BertPreTokenizer()
    backend.post_processor = TemplateProcessing(
        single="[CLS] $A [SEP]",
        pair="[CLS] $A [SEP] $B [SEP]",
        special_tokens=[("[CLS]", vocab["[CLS]"]), ("[SEP]", vocab["[SEP]"])],
    )
    tokenizer = PreTrainedTokenizerFast(
        tokenizer_object=backend,
        unk_token="[UNK]",
        pad_token="[PAD]",
        cls_token="[CLS]",
        sep_token="[SEP]",
        mask_token="[MASK]",
    )

    torch.manual_seed(0)
    config = BertConfig(
        vocab_size=len(vocab_list),
        hidden_size=32,
        num_hidden_layers=1,
        num_attention_heads=2,
        intermediate_size=64,
        max_position_embeddings=64,
        num_labels=HEAD_WIDTH,
    )
    target = tmp_path_factory.mktemp("checkpoint") / "tiny-bert"
    BertForMaskedLM(config).save_pretrained(target)
    tokenizer.save_pretrained(target)
    return target


@pytest.fixture(scope="session")
def backend_argv(tiny_checkpoint):
    return [sys.executable, "-m", "refbackend", "--model", str(tiny_checkpoint)]
