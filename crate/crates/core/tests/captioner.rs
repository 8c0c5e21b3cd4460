use flexmv_core::captioner::{
    detokenize, generate_caption, material_terms, merge_caption, parse_caption, Vocabulary, BOS,
    DEFAULT_MAX_TOKENS, EOS,
};
use flexmv_core::synthset::{
    render_view, sample_asset, CameraPose, LightParams, DEFAULT_OUTPUT_ELEVATION,
};
use flexmv_core::Error;

mod common;
use common::expected_attributes;

fn plain_words(p: &str) -> String {
    p.to_lowercase()
        .replace(['.', ','], " ")
        .split(' ')
        .filter(|w| !w.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

#[test]
fn full_prompts_parse_back_to_thresholded_attributes() {
    for seed in 0..1000u64 {
        let a = sample_asset(seed);
        let prompt = merge_caption(&generate_caption(&a), seed, 1.0).unwrap();
        assert_eq!(
            parse_caption(&prompt).unwrap(),
            expected_attributes(&a),
            "prompt: {prompt}"
        );
    }
}

#[test]
fn partial_prompts_leave_dropped_parts_unset() {
    for seed in 0..300u64 {
        let a = sample_asset(seed);
        let rec = generate_caption(&a);
        let prompt = merge_caption(&rec, seed + 17, 0.5).unwrap();
        let m = parse_caption(&prompt).unwrap();
        let full = expected_attributes(&a);
        assert_eq!((m.body, m.body_color), (full.body, full.body_color));
        assert_eq!(m.parts.len(), full.parts.len());
        for (got, want) in m.parts.iter().zip(&full.parts) {
            assert_eq!((got.kind, got.side), (want.kind, want.side));
            assert!(got.color.is_none() || got.color == want.color);
            assert_eq!(got.color.is_some(), got.texture.is_some());
        }
    }
}

#[test]
fn grammar_output_always_tokenizes_and_round_trips() {
    let vocab = Vocabulary::builtin();
    for seed in 0..2000u64 {
        let a = sample_asset(seed);
        for keep in [0.0, 0.5, 1.0] {
            let prompt = merge_caption(&generate_caption(&a), seed, keep).unwrap();
            let toks = vocab.tokenize(&prompt, DEFAULT_MAX_TOKENS).unwrap();
            assert_eq!(toks.ids.len(), DEFAULT_MAX_TOKENS);
            assert_eq!(toks.ids[0], BOS);
            assert_eq!(toks.ids[toks.active() - 1], EOS);
            assert!(toks.ids.iter().all(|&i| i < vocab.len()));
            for (i, &m) in toks.attention_mask.iter().enumerate() {
                assert_eq!(m, i < toks.active());
            }
            assert_eq!(detokenize(&vocab, &toks), plain_words(&prompt));
        }
    }
}

#[test]
fn material_terms_are_monotone_in_metallic() {
    let rank = |t: &[String]| -> i32 {
        if t.iter().any(|s| s == "low metallic") {
            0
        } else if t.iter().any(|s| s == "high metallic") {
            2
        } else {
            1
        }
    };
    for r in [0.0, 0.45, 1.0] {
        let mut prev = -1;
        for i in 0..=1000 {
            let cur = rank(&material_terms(i as f64 / 1000.0, r).unwrap());
            assert!(cur >= prev);
            prev = cur;
        }
    }
    assert!(matches!(material_terms(1.2, 0.5), Err(Error::Domain(_))));
    assert!(matches!(material_terms(0.5, -0.1), Err(Error::Domain(_))));
}

#[test]
fn captioned_parts_are_realized_in_the_facing_view() {
    let l = LightParams::default();
    let mut checked = 0;
    for seed in 0..100u64 {
        let a = sample_asset(seed);
        let m = parse_caption(&merge_caption(&generate_caption(&a), 0, 1.0).unwrap()).unwrap();
        for p in &m.parts {
            let az = p.side.facing_azimuth().unwrap_or(0.0);
            let pose = CameraPose::new(DEFAULT_OUTPUT_ELEVATION, az, 32).unwrap();
            let with = render_view(&a, &pose, &l).unwrap().pixels;
            let without = render_view(&a.without_parts(), &pose, &l).unwrap().pixels;
            assert_ne!(
                with, without,
                "seed {seed}: {:?} on the {:?}",
                p.kind, p.side
            );
            checked += 1;
        }
    }
    assert!(checked > 100);
}

#[test]
fn caption_record_json_uses_declared_field_names() {
    let rec = generate_caption(&sample_asset(3));
    let v: serde_json::Value = serde_json::from_str(&rec.to_json().unwrap()).unwrap();
    for key in ["global_desc", "local_descs", "material_terms"] {
        assert!(v.get(key).is_some());
    }
}
