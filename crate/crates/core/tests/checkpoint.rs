use alignvtoff_core::checkpoint::{Checkpoint, MAGIC, VERSION};
use alignvtoff_core::optim::{AdamW, AdamWConfig};
use alignvtoff_core::{Error, ParamStore, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn store() -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut s = ParamStore::new();
    s.add("a.w", Tensor::randn(&[3, 4], 1.0, &mut rng), true).unwrap();
    s.add("a.b", Tensor::randn(&[4], 1.0, &mut rng), false).unwrap();
    s.add("scale", Tensor::scalar(2.5), true).unwrap();
    s
}

fn bits(t: &Tensor) -> Vec<u32> {
    t.data().iter().map(|x| x.to_bits()).collect()
}

fn fake_grads(s: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = s.iter().map(|(id, _)| id).collect();
    for id in ids {
        let g = Tensor::randn(s.value(id).shape(), 1.0, &mut rng);
        s.accumulate_grad(id, &g);
    }
}

#[test]
fn parameters_and_metadata_round_trip_exactly() {
    let s = store();
    let mut ck = Checkpoint::from_store(&s);
    ck.meta.set("step", 12);
    let back = Checkpoint::decode(&ck.encode()).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.meta.get::<u64>("step").unwrap(), Some(12));
    let restored = back.to_store().unwrap();
    for ((_, a), (_, b)) in s.iter().zip(restored.iter()) {
        assert_eq!((&a.name, a.trainable, bits(&a.value)), (&b.name, b.trainable, bits(&b.value)));
    }
}

#[test]
fn optimizer_state_resumes_bit_identically() {
    let mut a = store();
    let mut opt = AdamW::new(AdamWConfig::default());
    for k in 0..3 {
        fake_grads(&mut a, k);
        opt.step(&mut a, 1e-2);
    }
    let mut ck = Checkpoint::from_store(&a);
    ck.add_optimizer(&a, &opt);
    let ck = Checkpoint::decode(&ck.encode()).unwrap();
    assert_eq!(ck.parameters().count(), 3);

    let mut b = store();
    ck.load_into(&mut b).unwrap();
    let mut opt_b = AdamW::new(AdamWConfig::default());
    ck.restore_optimizer(&b, &mut opt_b).unwrap();
    assert_eq!(opt_b.steps(), 3);

    fake_grads(&mut a, 9);
    opt.step(&mut a, 1e-2);
    fake_grads(&mut b, 9);
    opt_b.step(&mut b, 1e-2);
    assert_eq!(a.checksums(), b.checksums());
}

#[test]
fn header_is_version_then_magic() {
    let b = Checkpoint::from_store(&store()).encode();
    assert_eq!(b[0], VERSION);
    assert_eq!(&b[1..5], MAGIC);
}

fn is_format(r: Result<Checkpoint, Error>) -> bool {
    matches!(r, Err(Error::Format(_)))
}

#[test]
fn damaged_files_are_format_errors() {
    let good = Checkpoint::from_store(&store()).encode();
    for n in 0..good.len() {
        assert!(is_format(Checkpoint::decode(&good[..n])), "prefix {n}");
    }
    let mut extra = good.clone();
    extra.push(0);
    assert!(is_format(Checkpoint::decode(&extra)));

    let mut v = good.clone();
    v[0] = 2;
    assert!(is_format(Checkpoint::decode(&v)));
    let mut m = good.clone();
    m[2] = b'x';
    assert!(is_format(Checkpoint::decode(&m)));

    let text = String::from_utf8(good[9..9 + u32::from_le_bytes(good[5..9].try_into().unwrap()) as usize].to_vec()).unwrap();
    for (from, to) in [("\t48\n", "\t44\n"), ("\t1\t", "\t7\t"), ("3,4", "3,x")] {
        assert!(text.contains(from), "{from:?} in {text:?}");
        let bad = text.replacen(from, to, 1);
        let mut bytes = vec![VERSION];
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&(bad.len() as u32).to_le_bytes());
        bytes.extend_from_slice(bad.as_bytes());
        bytes.extend_from_slice(&good[9 + text.len()..]);
        assert!(is_format(Checkpoint::decode(&bytes)), "{from:?} -> {to:?}");
    }
}

#[test]
fn loading_into_a_mismatched_store_fails() {
    let ck = Checkpoint::from_store(&store());
    let mut missing = store();
    missing.add("extra", Tensor::zeros(&[1]), true).unwrap();
    assert!(matches!(ck.load_into(&mut missing), Err(Error::Format(m)) if m.contains("extra")));

    let mut wrong = ParamStore::new();
    wrong.add("a.w", Tensor::zeros(&[4, 3]), true).unwrap();
    assert!(matches!(ck.load_into(&mut wrong), Err(Error::Format(_))));
}

proptest! {
    #[test]
    fn arbitrary_tensors_round_trip(
        dims in prop::collection::vec(prop::collection::vec(1usize..5, 0..4), 1..5),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        for (i, d) in dims.iter().enumerate() {
            s.add(&format!("p{i}"), Tensor::randn(d, 3.0, &mut rng), i % 2 == 0).unwrap();
        }
        let back = Checkpoint::decode(&Checkpoint::from_store(&s).encode()).unwrap().to_store().unwrap();
        prop_assert_eq!(s.checksums(), back.checksums());
        for ((_, a), (_, b)) in s.iter().zip(back.iter()) {
            prop_assert_eq!(a.value.shape(), b.value.shape());
            prop_assert_eq!(a.trainable, b.trainable);
        }
    }
}
