"""Smoke test for the clinembed Python module.

Build and install first:  pip install --no-build-isolation crates/python
Then run:                 python python/smoke_test.py
"""

import math
import os
import tempfile

import clinembed as ce


def main():
    sentences = ce.preprocess("Dr. Smith saw the patient today. Hb was 21.7 and stable ___ overall.\nOK.")
    assert sentences == ["Dr. Smith saw the patient today.", "Hb was 21.7 and stable overall."], sentences

    texts, topics = ce.synthetic_corpus(120, 2, seed=3)
    assert len(texts) == len(topics) == 120 and set(topics) == {"renal", "cardiac"}

    vocab = ce.Vocabulary.build(texts, min_frequency=1)
    ids = vocab.encode(texts[0])
    tokens = vocab.decode(ids)
    assert tokens[0] == "<bos>" and tokens[-1] == "<eos>", tokens

    init = ce.Encoder(len(vocab), d_model=32, n_layers=1, n_heads=2, d_ffn=64, seed=1)
    simcse, s_loss = ce.train_simcse(init, vocab, texts, steps=30, batch_size=16)
    tsdae, t_loss = ce.train_tsdae(init, vocab, texts, steps=30, batch_size=16)
    assert len(s_loss) == len(t_loss) == 30
    assert all(math.isfinite(x) for x in s_loss + t_loss)
    print(f"simcse loss {s_loss[0]:.3f} -> {s_loss[-1]:.3f}, tsdae loss {t_loss[0]:.3f} -> {t_loss[-1]:.3f}")

    a = ce.embed_texts([simcse], vocab, texts)
    b = ce.embed_texts([tsdae], vocab, texts)
    hybrid = ce.concat(a, b)
    assert hybrid.dim == a.dim + b.dim == 64
    t0, t1 = texts[0], texts[1]
    want = (ce.cosine(a.get(t0), a.get(t1)) + ce.cosine(b.get(t0), b.get(t1))) / 2
    assert abs(ce.cosine(hybrid.get(t0), hybrid.get(t1)) - want) < 1e-6

    unique = dict(zip(texts, topics))
    v, h, c = ce.cluster_v_measure(hybrid, list(unique), list(unique.values()), seed=0)
    print(f"hybrid V-measure {v:.3f} (homogeneity {h:.3f}, completeness {c:.3f})")

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "h.emb")
        hybrid.save(path)
        back = ce.EmbeddingStore.load(path)
        assert back.ids == hybrid.ids and back.rows() == hybrid.rows()
        ckpt = os.path.join(d, "m.ckpt")
        simcse.save(ckpt)
        assert ce.Encoder.load(ckpt) == simcse
        with open(path, "rb") as f:
            data = f.read()
        with open(path, "wb") as f:
            f.write(data[:-3])
        try:
            ce.EmbeddingStore.load(path)
            raise AssertionError("truncated store was accepted")
        except ce.ClinembedError as e:
            assert "format" in str(e)

        assert ce.run_cli(["gen-synthetic", "--n-sentences", "10", "--out", os.path.join(d, "gen")]) == 0
        assert ce.run_cli(["no-such-command"]) == 2

    assert ce.spearman([1, 2, 3], [1, 3, 2]) == 0.5
    assert ce.ndcg_at_10(["a", "b", "c"], {"c": 1}) == 0.5
    assert ce.auroc([0.1, 0.9, 0.4], [False, True, True]) == 1.0
    assert abs(ce.info_nce_loss([[1.0, 0.0]] * 4, [[1.0, 0.0]] * 4) - math.log(4)) < 1e-9
    print("smoke test ok")


if __name__ == "__main__":
    main()
