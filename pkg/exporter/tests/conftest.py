import random
import string

import pytest
import torch


@pytest.fixture(scope="session")
def tiny_checkpoint(tmp_path_factory):
    """A small random-init causal LM plus a character-level tokenizer,
    saved in the standard checkpoint layout."""
    from tokenizers import Regex, Tokenizer, models, pre_tokenizers
    from transformers import LlamaConfig, LlamaForCausalLM, PreTrainedTokenizerFast

    path = tmp_path_factory.mktemp("ckpt") / "tiny-llama"

    alphabet = sorted(set(string.ascii_letters + string.digits + " .,!?"))
    vocab = {"[UNK]": 0, "[EOS]": 1}
    for ch in alphabet:
        vocab[ch] = len(vocab)
    tok = Tokenizer(models.WordLevel(vocab, unk_token="[UNK]"))
    tok.pre_tokenizer = pre_tokenizers.Split(Regex("."), "isolated")  # one char per token
    tokenizer = PreTrainedTokenizerFast(
        tokenizer_object=tok, unk_token="[UNK]", eos_token="[EOS]"
    )
    tokenizer.save_pretrained(path)

    torch.manual_seed(1234)
    config = LlamaConfig(
        vocab_size=len(vocab),
        hidden_size=64,
        intermediate_size=128,
        num_hidden_layers=4,
        num_attention_heads=4,
        num_key_value_heads=2,
        head_dim=16,
        max_position_embeddings=512,
        rope_theta=10000.0,
    )
    model = LlamaForCausalLM(config)
    model.save_pretrained(path)
    return path


@pytest.fixture(scope="session")
def texts_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("texts") / "docs.txt"
    rng = random.Random(7)
    words = ["alpha", "beta", "gamma", "delta", "cache", "laser", "medal", "quartz"]
    lines = [
        " ".join(rng.choice(words) for _ in range(rng.randint(20, 60)))
        for _ in range(120)
    ]
    path.write_text("\n".join(lines))
    return path
