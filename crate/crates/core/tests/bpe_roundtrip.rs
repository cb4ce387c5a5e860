use bytepatch_core::bpe::{train_bpe, BpeVocab};
use bytepatch_core::rng::seeded;
use rand::Rng;

#[test]
fn ten_thousand_random_strings_round_trip() {
    let corpus = "the theory of the thing is that there are three threads, then the end. ".repeat(8);
    let v = train_bpe([corpus.as_bytes()], 320).unwrap();
    assert!(v.size() > 256);
    let mut rng = seeded(10_000);
    let alphabet = b"the ory\nfingsd.,\xd0\xb0\xff";
    for k in 0..10_000 {
        let n = rng.random_range(0..48);
        let x: Vec<u8> = if k % 2 == 0 {
            (0..n).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect()
        } else {
            (0..n).map(|_| rng.random()).collect()
        };
        let e = v.encode(&x);
        assert_eq!(v.decode(&e.ids).unwrap(), x);
        assert!(e.len() <= x.len());
    }
}

#[test]
fn merge_list_reload_reproduces_encodings() {
    let corpus = "абв абв где абв где ".repeat(5);
    let v = train_bpe([corpus.as_bytes()], 270).unwrap();
    let w = BpeVocab::from_merges(&v.merge_bytes()).unwrap();
    let text = "где абв и где".as_bytes();
    assert_eq!(v.encode(text), w.encode(text));
    assert!(v.encode(text).len() < text.len());
    assert!(v.decode(&[v.size() as u32]).is_err());
}
