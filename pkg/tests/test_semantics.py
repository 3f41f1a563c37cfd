import numpy as np
import pytest

from dualrec.semantics import (
    ROUTES,
    CacheCorrupt,
    CacheMiss,
    ItemAttributes,
    ProviderConfig,
    ProviderError,
    RemoteProvider,
    SemanticCache,
    SemanticRecord,
    SyntheticProvider,
    TransientProviderError,
    build_hybrid_prompt,
    build_text_prompt,
    build_visual_prompt,
    embed_items,
    enumerate_attributes,
    load_route_matrix,
    make_provider,
    matrices_from_records,
    serialize_original_text,
    synthesize_structured_embeddings,
)

TOY = ItemAttributes(pairs=(("title", "Toy Story"), ("genres", "Animation")), image_path="img/1.jpg")


def test_text_prompt_enumerates_in_order():
    prompt = build_text_prompt(TOY)
    assert "title: Toy Story; genres: Animation." in prompt
    assert prompt.endswith("for recommendation.")


def test_text_prompt_single_attribute_no_trailing_separator():
    prompt = build_text_prompt(ItemAttributes(pairs=(("title", "Up"),)))
    assert "attributes: title: Up." in prompt
    assert "title: Up;" not in prompt


def test_text_prompt_byte_stable():
    assert build_text_prompt(TOY) == build_text_prompt(TOY)


def test_text_prompt_rejects_empty():
    with pytest.raises(ValueError):
        build_text_prompt(ItemAttributes(pairs=()))


def test_visual_prompt_substitutes_path():
    prompt = build_visual_prompt("img/1.jpg")
    assert "img/1.jpg" in prompt
    assert "pay close attention to specific visual elements" in prompt


def test_visual_prompt_path_with_spaces_verbatim():
    assert "my dir/pic 2.png" in build_visual_prompt("my dir/pic 2.png")


def test_visual_prompt_rejects_empty_path():
    with pytest.raises(ValueError):
        build_visual_prompt("")


def test_hybrid_prompt_has_three_step_headings():
    prompt = build_hybrid_prompt(TOY, "img/1.jpg")
    for heading in ("Step 1", "Step 2", "Step 3"):
        assert heading in prompt


def test_hybrid_prompt_shares_attribute_formatter():
    prompt = build_hybrid_prompt(TOY, "img/1.jpg")
    assert enumerate_attributes(TOY) in prompt


def test_hybrid_prompt_requires_both_modalities():
    with pytest.raises(ValueError):
        build_hybrid_prompt(ItemAttributes(pairs=()), "img/1.jpg")
    with pytest.raises(ValueError):
        build_hybrid_prompt(TOY, "")


def test_serialize_original_text():
    assert serialize_original_text(ItemAttributes(pairs=(("title", "Toy Story"),))) == "title: Toy Story"
    two = serialize_original_text(TOY)
    assert two == "title: Toy Story; genres: Animation"
    # no instruction sentence leaks into the raw serialization
    assert "Summarize the item" not in two


def test_synthetic_provider_deterministic():
    provider = SyntheticProvider(ProviderConfig(kind="synthetic", d0=16, seed=3))
    prompt = build_text_prompt(TOY)
    assert provider.fetch_description(prompt) == provider.fetch_description(prompt)
    v1 = provider.embed_text("hello")
    v2 = provider.embed_text("hello")
    assert np.array_equal(v1, v2)
    assert v1.shape == (16,)
    assert abs(np.linalg.norm(v1) - 1.0) < 1e-9
    assert not np.array_equal(v1, provider.embed_text("other text"))


def test_synthetic_provider_rejects_empty_text():
    provider = SyntheticProvider(ProviderConfig(d0=8))
    with pytest.raises(ValueError):
        provider.embed_text("")


def make_flaky_transport(failures: int, response: dict):
    calls = {"n": 0}

    def transport(url, payload, timeout, token):
        calls["n"] += 1
        if calls["n"] <= failures:
            raise TransientProviderError("simulated 503")
        return response

    return transport, calls


def test_remote_retries_then_succeeds():
    transport, calls = make_flaky_transport(2, {"text": "a description"})
    provider = RemoteProvider(ProviderConfig(kind="remote", retries=3, d0=4), transport=transport)
    assert provider.fetch_description("p") == "a description"
    assert calls["n"] == 3


def test_remote_budget_exhausted_carries_last_failure():
    transport, _ = make_flaky_transport(10, {})
    provider = RemoteProvider(ProviderConfig(kind="remote", retries=1, d0=4), transport=transport)
    with pytest.raises(ProviderError, match="503"):
        provider.fetch_description("p")


def test_remote_empty_description_is_error():
    provider = RemoteProvider(
        ProviderConfig(kind="remote", retries=1, d0=4),
        transport=lambda *a: {"text": ""},
    )
    with pytest.raises(ProviderError, match="empty"):
        provider.fetch_description("p")


def test_remote_dimension_mismatch_reports_lengths():
    provider = RemoteProvider(
        ProviderConfig(kind="remote", retries=1, d0=4),
        transport=lambda *a: {"embedding": [1.0, 2.0]},
    )
    with pytest.raises(ProviderError, match="2.*4"):
        provider.embed_text("t")


def test_make_provider_dispatch():
    assert make_provider(ProviderConfig(kind="synthetic")).kind == "synthetic"
    assert make_provider(ProviderConfig(kind="remote")).kind == "remote"
    with pytest.raises(ValueError):
        make_provider(ProviderConfig(kind="psychic"))


def test_cache_roundtrip(tmp_path):
    cache = SemanticCache(tmp_path)
    vec = np.random.default_rng(0).normal(size=8).astype(np.float32)
    cache.put("ds", "fp", SemanticRecord("item/1", "text_route", vec, "desc"))
    record = cache.get("ds", "fp", "item/1", "text_route")
    assert np.array_equal(record.vector, vec)
    assert record.description == "desc"


def test_cache_miss_is_distinct(tmp_path):
    cache = SemanticCache(tmp_path)
    with pytest.raises(CacheMiss):
        cache.get("ds", "fp", "nope", "text_route")


def test_cache_truncated_record_is_corruption(tmp_path):
    cache = SemanticCache(tmp_path)
    cache.put("ds", "fp", SemanticRecord("x", "text_route", np.ones(8, np.float32)))
    path = cache.record_path("ds", "fp", "x", "text_route")
    path.write_bytes(path.read_bytes()[:-6])
    with pytest.raises(CacheCorrupt):
        cache.get("ds", "fp", "x", "text_route")


def test_cache_checksum_mismatch_is_corruption(tmp_path):
    cache = SemanticCache(tmp_path)
    cache.put("ds", "fp", SemanticRecord("x", "text_route", np.ones(8, np.float32)))
    path = cache.record_path("ds", "fp", "x", "text_route")
    blob = bytearray(path.read_bytes())
    blob[-1] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(CacheCorrupt, match="checksum"):
        cache.get("ds", "fp", "x", "text_route")


def test_embed_items_writes_four_routes_and_resumes(tmp_path):
    cache = SemanticCache(tmp_path)
    provider = SyntheticProvider(ProviderConfig(kind="synthetic", d0=8, seed=1))
    items = [(f"i{k}", TOY) for k in range(3)]
    written = embed_items(items, provider, cache, "ds")
    assert written == {route: 3 for route in ROUTES}
    # resume: nothing new to write
    written = embed_items(items, provider, cache, "ds")
    assert written == {route: 0 for route in ROUTES}


def test_load_route_matrix_names_missing_item(tmp_path):
    cache = SemanticCache(tmp_path)
    with pytest.raises(CacheMiss, match="item 'i0' route 'text_route'"):
        load_route_matrix(cache, "ds", "fp", ["i0"], "text_route", 8)


def test_structured_embeddings_zero_noise_shares_centroid():
    records = synthesize_structured_embeddings(["a", "b", "c"], clusters=1, noise=0.0, seed=0, d0=8)
    vectors = [r.vector for r in records]
    for v in vectors[1:]:
        assert np.allclose(v, vectors[0], atol=1e-7)


def test_structured_embeddings_routes_identical_at_zero_noise():
    records = synthesize_structured_embeddings(["a", "b"], clusters=2, noise=0.0, seed=0, d0=8)
    by_item = {}
    for r in records:
        by_item.setdefault(r.item_id, []).append(r.vector)
    for vectors in by_item.values():
        assert len(vectors) == 4
        for v in vectors[1:]:
            assert np.allclose(v, vectors[0], atol=1e-7)


def test_structured_embeddings_cluster_separation():
    item_ids = [f"i{k}" for k in range(40)]
    records = synthesize_structured_embeddings(item_ids, clusters=2, noise=0.1, seed=5, d0=24)
    mats = matrices_from_records(records, item_ids, 24)
    clusters = np.arange(40) % 2
    sims = mats.text @ mats.text.T
    intra = sims[np.equal.outer(clusters, clusters) & ~np.eye(40, dtype=bool)].mean()
    inter = sims[~np.equal.outer(clusters, clusters)].mean()
    assert intra > inter


def test_structured_embeddings_deterministic():
    a = synthesize_structured_embeddings(["x", "y"], 2, 0.1, seed=9, d0=6)
    b = synthesize_structured_embeddings(["x", "y"], 2, 0.1, seed=9, d0=6)
    for ra, rb in zip(a, b):
        assert np.array_equal(ra.vector, rb.vector)


def test_fingerprint_distinguishes_providers():
    a = ProviderConfig(kind="synthetic", d0=8, seed=0).fingerprint()
    b = ProviderConfig(kind="synthetic", d0=8, seed=1).fingerprint()
    assert a != b
