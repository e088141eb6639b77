//! Randomized invariants of tensors, layers, models, splits and file formats.

mod common;

use gesture_vit::io::{container_len, decode_checkpoint, encode_checkpoint, load_dataset, save_dataset, Dataset};
use gesture_vit::model::{count_params, Model, ModelConfig, Variant};
use gesture_vit::nn::{AttentionSpec, HeadConvention, MultiHeadAttention, ParamStore, PatchEmbedding, TransformerLayer};
use gesture_vit::tensor::{conv2d, dropout, maxpool2d, pooled_extent, softmax, transposed_conv2d};
use gesture_vit::train::{compute_metrics, evaluate, make_split, FOLDS};
use gesture_vit::verify::end_to_end_config;
use gesture_vit::Tensor;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn permute_rows(x: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let d = x.dim(1);
    let mut out = Vec::with_capacity(x.len());
    for &p in perm {
        out.extend_from_slice(&x.data()[p * d..(p + 1) * d]);
    }
    Tensor::new(x.shape(), out).unwrap()
}

fn attention_spec(d: usize, heads: usize, convention: HeadConvention) -> AttentionSpec {
    AttentionSpec {
        model_dim: d,
        heads,
        layers: 1,
        mlp_hidden: 2 * d,
        head_convention: convention,
        ..AttentionSpec::default()
    }
}

fn convention() -> impl Strategy<Value = HeadConvention> {
    prop_oneof![Just(HeadConvention::SplitDk), Just(HeadConvention::WholeDk)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn row_major_offset(shape in prop::collection::vec(1usize..6, 1..5), pick in any::<u64>()) {
        let t = Tensor::<f64>::zeros(&shape);
        let mut rng = ChaCha8Rng::seed_from_u64(pick);
        let index: Vec<usize> = shape.iter().map(|&e| rng.random_range(0..e)).collect();
        let mut expect = 0;
        for (i, e) in index.iter().zip(&shape) {
            expect = expect * e + i;
        }
        prop_assert_eq!(t.offset(&index), expect);
        prop_assert_eq!(t.len(), shape.iter().product::<usize>());
    }

    #[test]
    fn softmax_slices_are_distributions(rows in 1usize..6, cols in 1usize..9, scale in 0.1f64..500.0, seed in any::<u64>()) {
        let x = random_tensor(&[rows, cols], seed).map(|v| v * scale);
        for axis in 0..2 {
            let y = softmax(&x, axis).unwrap();
            prop_assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            let (outer, inner) = if axis == 1 { (rows, cols) } else { (cols, rows) };
            for o in 0..outer {
                let s: f64 = (0..inner)
                    .map(|i| if axis == 1 { y.at(&[o, i]) } else { y.at(&[i, o]) })
                    .sum();
                prop_assert!((s - 1.0).abs() < 1e-6, "slice sum {}", s);
            }
        }
    }

    #[test]
    fn conv_same_padding_keeps_extent(
        k in prop::sample::select(vec![1usize, 3, 5, 7]),
        h in 1usize..12, w in 1usize..12, c in 1usize..4, f in 1usize..4, seed in any::<u64>(),
    ) {
        let x = random_tensor(&[h, w, c], seed);
        let y = conv2d(&x, &random_tensor(&[k, k, c, f], seed ^ 1), &random_tensor(&[f], seed ^ 2)).unwrap();
        prop_assert_eq!(y.shape(), &[h, w, f]);
    }

    #[test]
    fn pooling_uses_ceiling(h in 1usize..200, w in 1usize..9) {
        prop_assert_eq!(pooled_extent(h), h.div_ceil(2));
        let x = random_tensor(&[h, w, 2], h as u64);
        let out = maxpool2d(&x).unwrap().output;
        prop_assert_eq!(out.shape(), &[h.div_ceil(2), w.div_ceil(2), 2]);
        // Every pooled value is the max of its (possibly truncated) window.
        for i in 0..out.dim(0) {
            for j in 0..out.dim(1) {
                for ch in 0..2 {
                    let mut m = f64::NEG_INFINITY;
                    for a in 2 * i..(2 * i + 2).min(h) {
                        for b in 2 * j..(2 * j + 2).min(w) {
                            m = m.max(x.at(&[a, b, ch]));
                        }
                    }
                    prop_assert_eq!(out.at(&[i, j, ch]), m);
                }
            }
        }
    }

    #[test]
    fn transposed_conv_doubles_extents(h in 1usize..10, w in 1usize..10, c in 1usize..4, f in 1usize..4, seed in any::<u64>()) {
        let x = random_tensor(&[h, w, c], seed);
        let y = transposed_conv2d(&x, &random_tensor(&[1, 1, c, f], seed ^ 1), &random_tensor(&[f], seed ^ 2)).unwrap();
        prop_assert_eq!(y.shape(), &[2 * h, 2 * w, f]);
    }

    #[test]
    fn dropout_is_identity_in_eval(len in 1usize..200, rate in 0.0f64..0.95, seed in any::<u64>()) {
        let x = random_tensor(&[len], seed);
        let out = dropout(&x, rate, false, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert!(out.mask.is_none());
        prop_assert_eq!(out.output.data(), x.data());
    }

    #[test]
    fn dropout_training_keeps_or_rescales(len in 1usize..200, rate in 0.05f64..0.95, seed in any::<u64>()) {
        let x = random_tensor(&[len], seed);
        let out = dropout(&x, rate, true, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let keep = 1.0 / (1.0 - rate);
        for (y, v) in out.output.data().iter().zip(x.data()) {
            prop_assert!(*y == 0.0 || (y - v * keep).abs() <= 1e-12 * keep);
        }
    }

    #[test]
    fn attention_rows_are_stochastic(
        tokens in 1usize..8, heads in 1usize..4, per_head in 1usize..4,
        conv in convention(), seed in any::<u64>(),
    ) {
        let d = heads * per_head;
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mha = MultiHeadAttention::new(&mut store, "a", &attention_spec(d, heads, conv), &mut rng).unwrap();
        let (_, cache) = mha.forward(&store, &random_tensor(&[tokens, d], seed ^ 7)).unwrap();
        prop_assert_eq!(cache.weights.len(), heads);
        for a in &cache.weights {
            prop_assert_eq!(a.shape(), &[tokens, tokens]);
            for row in a.data().chunks_exact(tokens) {
                prop_assert!(row.iter().all(|&v| v >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_is_permutation_equivariant(
        tokens in 2usize..8, heads in 1usize..4, per_head in 1usize..4,
        conv in convention(), seed in any::<u64>(),
    ) {
        let d = heads * per_head;
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = TransformerLayer::new(&mut store, "l", &attention_spec(d, heads, conv), &mut rng).unwrap();
        let x = random_tensor(&[tokens, d], seed ^ 3);
        let mut perm: Vec<usize> = (0..tokens).collect();
        perm.shuffle(&mut rng);
        let (y, _) = layer.forward(&store, &x).unwrap();
        let (yp, _) = layer.forward(&store, &permute_rows(&x, &perm)).unwrap();
        let expect = permute_rows(&y, &perm);
        for (a, b) in yp.data().iter().zip(expect.data()) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn positional_embedding_breaks_equivariance(tokens in 2usize..8, d in 2usize..6, seed in any::<u64>()) {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embed = PatchEmbedding::new(&mut store, "e", tokens, 3, d, &mut rng).unwrap();
        let patches = random_tensor(&[tokens, 3], seed ^ 5);
        let perm: Vec<usize> = (1..tokens).chain(std::iter::once(0)).collect();
        let y = embed.forward(&store, &patches).unwrap();
        let yp = embed.forward(&store, &permute_rows(&patches, &perm)).unwrap();
        let expect = permute_rows(&y, &perm);
        let gap = yp.data().iter().zip(expect.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(gap > 1e-9, "positions did not change the permuted output");
    }

    #[test]
    fn zeroed_sublayers_leave_the_residual(tokens in 1usize..6, heads in 1usize..3, per_head in 1usize..4, seed in any::<u64>()) {
        let d = heads * per_head;
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = TransformerLayer::new(&mut store, "l", &attention_spec(d, heads, HeadConvention::SplitDk), &mut rng).unwrap();
        for id in [layer.attention.output.weight, layer.mlp_out.weight] {
            store.value_mut(id).fill(0.0);
        }
        for id in [layer.attention.output.bias, layer.mlp_out.bias].into_iter().flatten() {
            store.value_mut(id).fill(0.0);
        }
        let x = random_tensor(&[tokens, d], seed ^ 9);
        let (y, _) = layer.forward(&store, &x).unwrap();
        prop_assert_eq!(y.data(), x.data());
    }

    #[test]
    fn split_partitions_the_indices(labels in prop::collection::vec(0u8..14, 10..300), seed in any::<u64>()) {
        let n = labels.len();
        let plan = make_split(&labels, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert!(plan.validate(n).is_ok());
        prop_assert_eq!(plan.train.len(), (4 * n + 2) / 5);
        prop_assert_eq!(plan.folds.len(), FOLDS);
        let mut seen = vec![0u8; n];
        for f in &plan.folds {
            for &i in f {
                seen[i] += 1;
            }
        }
        for &i in &plan.train {
            prop_assert_eq!(seen[i], 1);
        }
        for &i in &plan.test {
            prop_assert_eq!(seen[i], 0);
        }
    }

    #[test]
    fn confusion_rows_count_labels(pairs in prop::collection::vec((0usize..14, 0usize..14), 1..400)) {
        let (preds, labels): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let m = compute_metrics(&preds, &labels, 14).unwrap();
        let trace: u64 = (0..14).map(|c| m.confusion[c][c]).sum();
        prop_assert_eq!(m.accuracy, trace as f64 / pairs.len() as f64);
        for c in 0..14 {
            let row: u64 = m.confusion[c].iter().sum();
            prop_assert_eq!(row as usize, labels.iter().filter(|&&l| l == c).count());
        }
        for v in [m.macro_precision, m.macro_recall, m.macro_f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn dataset_container_length(count in 1usize..12, h in 1usize..6, w in 1usize..6, c in 1usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images = (0..count).map(|_| Tensor::from_fn(&[h, w, c], |_| rng.random::<f32>())).collect();
        let labels = (0..count).map(|_| rng.random_range(0u8..14)).collect();
        let data = Dataset::new([h, w, c], images, labels).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        save_dataset(&path, &data).unwrap();
        let len = std::fs::metadata(&path).unwrap().len();
        prop_assert_eq!(len, container_len(count, [h, w, c]));
        prop_assert_eq!(len, 16 + count as u64 * (1 + 4 * (h * w * c) as u64));
        let back = load_dataset(&path).unwrap();
        prop_assert_eq!(back.labels(), data.labels());
        for (a, b) in back.images().iter().zip(data.images()) {
            prop_assert_eq!(bits(a), bits(b));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn checkpoint_round_trip_and_corruption(variant in prop::sample::select(Variant::ALL.to_vec()), seed in any::<u64>(), flip in any::<prop::sample::Index>(), mask in 1u8..=255) {
        let model = Model::<f32>::build(&end_to_end_config(variant, seed)).unwrap();
        let bytes = encode_checkpoint(&model).unwrap();
        let back: Model<f32> = decode_checkpoint(&bytes).unwrap();
        prop_assert_eq!(back.config(), model.config());
        for (a, b) in back.store().entries().iter().zip(model.store().entries()) {
            prop_assert_eq!(&a.name, &b.name);
            prop_assert_eq!(bits(&a.value), bits(&b.value));
        }
        let mut bad = bytes.clone();
        bad[flip.index(bytes.len())] ^= mask;
        prop_assert!(decode_checkpoint::<f32>(&bad).is_err());
    }

    #[test]
    fn count_is_sum_of_shapes_and_matches_closed_form(
        variant in prop::sample::select(Variant::ALL.to_vec()),
        heads in 1usize..4, per_head in 1usize..5, layers in 0usize..4,
        conv in convention(), bias in any::<bool>(), final_norm in any::<bool>(),
    ) {
        let mut cfg = end_to_end_config(variant, 0);
        cfg.attention.heads = heads;
        cfg.attention.model_dim = heads * per_head;
        cfg.attention.layers = layers;
        cfg.attention.head_convention = conv;
        cfg.attention.projection_bias = bias;
        cfg.attention.final_norm = final_norm;
        let model = Model::<f32>::build(&cfg).unwrap();
        let by_shape: usize = model.store().entries().iter().map(|e| e.value.shape().iter().product::<usize>()).sum();
        let (total, trainable) = count_params(&cfg).unwrap();
        prop_assert_eq!(total, by_shape);
        prop_assert_eq!(trainable, total);
        prop_assert_eq!(total, common::closed_form_params(&cfg));
    }

    #[test]
    fn same_seed_same_parameters(variant in prop::sample::select(Variant::ALL.to_vec()), seed in any::<u64>()) {
        let a = Model::<f32>::build(&end_to_end_config(variant, seed)).unwrap();
        let b = Model::<f32>::build(&end_to_end_config(variant, seed)).unwrap();
        for (x, y) in a.store().entries().iter().zip(b.store().entries()) {
            prop_assert_eq!(bits(&x.value), bits(&y.value));
        }
    }

    #[test]
    fn evaluate_ignores_sample_order(seed in any::<u64>()) {
        let cfg = end_to_end_config(Variant::Full, seed);
        let model = Model::<f32>::build(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 30;
        let images: Vec<Tensor<f32>> = (0..n).map(|_| Tensor::from_fn(&cfg.input, |_| rng.random::<f32>())).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0u8..14)).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let data = Dataset::new(cfg.input, images, labels).unwrap();
        let shuffled = data.subset(&perm).unwrap();
        prop_assert_eq!(evaluate(&model, &data).unwrap(), evaluate(&model, &shuffled).unwrap());
    }
}

#[test]
fn full_reference_model_matches_closed_form() {
    for conv in [HeadConvention::SplitDk, HeadConvention::WholeDk] {
        let mut cfg = ModelConfig::default();
        cfg.attention.head_convention = conv;
        assert_eq!(count_params(&cfg).unwrap().0, common::closed_form_params(&cfg), "{conv:?}");
    }
}
