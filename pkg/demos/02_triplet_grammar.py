"""
Caption edit triplets: grammar rules and the LLM client
=======================================================

A triplet is (caption t, modification m, modified caption u). The grammar
path derives them deterministically from token-level rules; the LLM path
asks a remote endpoint, here stubbed with a local transport.
"""

from scotkit import Pcg32
from scotkit.triplets import (
    DEFAULT_RULES,
    LlmEndpointConfig,
    gen_template_triplet,
    llm_generate,
    validate_triplet,
)
from scotkit.errors import NoRuleAppliesError

# Each rule matches a token class and rewrites the caption by substitution,
# insertion, or deletion. Same caption + same seed = same triplet.
for caption in ("a red dress", "a striped sofa", "a green hat"):
    t = gen_template_triplet(caption, DEFAULT_RULES, Pcg32(4))
    print(f"t: {t.caption!r:24} m: {t.modification!r:38} u: {t.modified_caption!r}")

# Different seeds pick different applicable rules.
seen = {gen_template_triplet("a red dress", DEFAULT_RULES, Pcg32(s)).modification
        for s in range(12)}
print("\nedits seen across 12 seeds:")
for m in sorted(seen):
    print("  -", m)

# Captions no rule understands are reported, not silently dropped.
try:
    gen_template_triplet("xqzt", DEFAULT_RULES, Pcg32(0))
except NoRuleAppliesError as exc:
    print("\nno rule:", exc)

# The validator is the shared gate for both paths: empty texts, overlong
# texts, and no-op edits are rejected with a reason.
print("\nvalidate ('a dog' -> 'a cat'):", validate_triplet("a dog", "make it a cat", "a cat"))
print("validate no-op edit:", validate_triplet("a dog", "keep it", "a dog"))

# The LLM client takes an injectable transport, so the whole request cycle
# runs offline here. The real transport POSTs JSON to cfg.base_url with a
# bearer token from SCOT_LLM_API_KEY.
cfg = LlmEndpointConfig(
    base_url="http://llm.example/v1/edit",
    model_name="editor-demo",
    prompt_template="Rewrite with one visual edit: {caption}",
)


def canned_transport(url, body, headers, timeout):
    print(f"\nrequest -> {url}\n  prompt: {body['prompt']!r}")
    return {"modification": "make it sleeveless",
            "modified_caption": "a sleeveless red dress"}


t = llm_generate("a red dress", cfg, transport=canned_transport)
print(f"endpoint triplet: m={t.modification!r} u={t.modified_caption!r}")
