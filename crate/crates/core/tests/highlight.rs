mod common;

use common::*;
use highlighter_core::context::{ContextLayout, VisionMapping};
use highlighter_core::highlight::{downsample_region, splice, CoverageRule, HighlightMask, PatchRegion};
use highlighter_core::tokenizer::{align_span, ByteTokenizer, Offset, TokenSpan};
use highlighter_core::Error;
use proptest::prelude::*;

#[test]
fn spans_match_brute_force() {
    let mut r = rng(1);
    for _ in 0..500 {
        let len = 2 + below(&mut r, 30);
        let spans: Vec<TokenSpan> = (0..below(&mut r, 4))
            .map(|_| {
                let a = 1 + below(&mut r, len - 1);
                let b = a + 1 + below(&mut r, len - a);
                TokenSpan { token_start: a, token_end: b, char_start: a, char_end: b }
            })
            .collect();
        let got = HighlightMask::from_spans(len, &spans).unwrap();
        let want: Vec<bool> = (0..len).map(|i| spans.iter().any(|s| s.token_start <= i && i < s.token_end)).collect();
        assert_eq!(got.bits(), &want[..]);
    }
    let sink = TokenSpan { token_start: 0, token_end: 2, char_start: 0, char_end: 2 };
    assert_eq!(HighlightMask::from_spans(4, &[sink]), Err(Error::SinkToken));
}

/// Random contiguous segmentation of `len` bytes into tokens.
fn segmentation(r: &mut highlighter_core::rng::Xoshiro256StarStar, len: usize) -> Vec<Offset> {
    let mut out = Vec::new();
    let mut at = 0;
    while at < len {
        let w = 1 + below(r, 4).min(len - at - 1);
        out.push((at, at + w));
        at += w;
    }
    out
}

#[test]
fn alignment_matches_brute_force() {
    let mut r = rng(2);
    for _ in 0..300 {
        let len = 1 + below(&mut r, 25);
        let offsets = segmentation(&mut r, len);
        for a in 0..len {
            for b in a + 1..=len {
                let s = align_span(&offsets, a, b).unwrap();
                let touched: Vec<usize> =
                    (0..offsets.len()).filter(|&t| offsets[t].0 < b && offsets[t].1 > a).collect();
                assert_eq!(s.token_start, touched[0]);
                assert_eq!(s.token_end, touched.last().unwrap() + 1);
                assert_eq!((s.char_start, s.char_end), (offsets[s.token_start].0, offsets[s.token_end - 1].1));
                assert!(s.char_start <= a && b <= s.char_end);
            }
        }
        assert!(align_span(&offsets, 0, len + 1).is_err());
    }
}

fn pixel_oracle(
    sel: &dyn Fn(usize, usize) -> bool,
    (w, h): (usize, usize),
    grid: usize,
    threshold: Option<f64>,
) -> Vec<bool> {
    let mut out = Vec::new();
    for gy in 0..grid {
        for gx in 0..grid {
            let (mut on, mut all) = (0usize, 0usize);
            for py in 0..h {
                for px in 0..w {
                    if gx * w / grid <= px
                        && px < (gx + 1) * w / grid
                        && gy * h / grid <= py
                        && py < (gy + 1) * h / grid
                    {
                        all += 1;
                        on += sel(px, py) as usize;
                    }
                }
            }
            out.push(match threshold {
                Some(t) => on > 0 && on as f64 >= t * all as f64,
                None => on > 0,
            });
        }
    }
    out
}

#[test]
fn downsampling_matches_per_pixel_count() {
    let mut r = rng(3);
    let mut checked = 0;
    while checked < 200 {
        let grid = 2 + below(&mut r, 6);
        let (w, h) = (grid + below(&mut r, 30), grid + below(&mut r, 30));
        let (x, y) = (below(&mut r, w), below(&mut r, h));
        let (rw, rh) = (1 + below(&mut r, w - x), 1 + below(&mut r, h - y));
        let rect = PatchRegion::Rect { x, y, width: rw, height: rh };
        let inside = |px: usize, py: usize| px >= x && px < x + rw && py >= y && py < y + rh;
        let bits: Vec<bool> = (0..w * h).map(|i| inside(i % w, i / w)).collect();
        let bitmap = PatchRegion::Bitmap { width: w, height: h, bits };
        for (rule, t) in [(CoverageRule::Fraction(0.5), Some(0.5)), (CoverageRule::AnyOverlap, None)] {
            let want = pixel_oracle(&inside, (w, h), grid, t);
            for region in [&rect, &bitmap] {
                match downsample_region(region, (w, h), grid, rule) {
                    Ok(got) => assert_eq!(got, want),
                    Err(Error::EmptySelection) => assert!(!want.iter().any(|&b| b)),
                    Err(e) => panic!("{e}"),
                }
            }
        }
        checked += 1;
    }
}

#[test]
fn splice_matches_oracle() {
    let mut r = rng(4);
    for _ in 0..200 {
        let patches = 1 + below(&mut r, 9);
        let text = 1 + below(&mut r, 6);
        let queries = 1 + below(&mut r, 4);
        for mapping in [VisionMapping::Direct, VisionMapping::QFormer] {
            let layout = match mapping {
                VisionMapping::Direct => ContextLayout::builder().bos().direct_image(patches).text(text).build(),
                VisionMapping::QFormer => {
                    ContextLayout::builder().bos().query_image(patches, queries).text(text).build()
                }
            };
            let n = layout.len();
            let img = match mapping {
                VisionMapping::Direct => patches,
                VisionMapping::QFormer => queries,
            };
            let text_bits: Vec<bool> = (0..n).map(|i| i > img && r.next_f32() < 0.5).collect();
            let pm: Vec<bool> = (0..patches).map(|_| r.next_f32() < 0.3).collect();
            let got = splice(&HighlightMask::from_bits(text_bits.clone()), Some(&pm), &layout).unwrap();
            let any = pm.iter().any(|&b| b);
            let want: Vec<bool> = (0..n)
                .map(|i| match i {
                    0 => false,
                    i if i <= img => match mapping {
                        VisionMapping::Direct => pm[i - 1],
                        VisionMapping::QFormer => any,
                    },
                    i => text_bits[i],
                })
                .collect();
            assert_eq!(got.bits(), &want[..]);
        }
    }
}

proptest! {
    #[test]
    fn encode_round_trips(s in "\\PC{0,40}") {
        let e = ByteTokenizer.encode(&s);
        prop_assert_eq!(ByteTokenizer.decode(&e.ids), s.clone());
        prop_assert_eq!(e.ids.len(), s.len());
        prop_assert_eq!(e.offsets.last().map_or(0, |o| o.1), s.len());
    }

    #[test]
    fn aligned_span_covers_selection(s in "[a-z ]{1,30}", a in 0usize..30, w in 1usize..10) {
        let e = ByteTokenizer.encode(&s);
        let b = (a + w).min(s.len());
        prop_assume!(a < b);
        let span = align_span(&e.offsets, a, b).unwrap();
        prop_assert!(span.char_start <= a && b <= span.char_end);
        prop_assert!(span.token_start < span.token_end);
    }

    #[test]
    fn union_is_bitwise_or(bits in proptest::collection::vec(any::<(bool, bool)>(), 1..40)) {
        let a = HighlightMask::from_bits(bits.iter().map(|p| p.0).collect());
        let b = HighlightMask::from_bits(bits.iter().map(|p| p.1).collect());
        let u = a.union(&b).unwrap();
        for (i, p) in bits.iter().enumerate() {
            prop_assert_eq!(u.bits()[i], p.0 || p.1);
        }
    }
}
