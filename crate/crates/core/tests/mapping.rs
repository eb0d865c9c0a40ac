mod common;

use common::*;
use ragkit::chunker::ChunkId;
use ragkit::corpus::ParagraphId;
use ragkit::extractor::{map_chunks, DedupScore, MappingOptions, MappingOrder};
use ragkit::retriever::Hit;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn two_hundred_fixtures_match_group_by_argmax() {
    check_mapping().unwrap();
}

#[test]
fn twelve_hits_three_collision_groups() {
    let corpus = small_corpus(6);
    let ps = corpus.paragraphs();
    // (parent, seq, fine) in retrieval order; parents 0, 2 and 4 collide.
    let groups = [
        (0, 3, 0.95),
        (1, 0, 0.90),
        (2, 1, 0.88),
        (0, 1, 0.80),
        (3, 0, 0.75),
        (2, 0, 0.88),
        (4, 5, 0.60),
        (4, 2, 0.70),
        (5, 0, 0.55),
        (0, 0, 0.50),
        (4, 0, 0.45),
        (2, 4, 0.40),
    ];
    let mut hits: Vec<Hit<f32>> = groups
        .iter()
        .map(|&(p, seq, fine)| Hit {
            chunk: chunk(&ps[p].id, seq, &format!("{p}/{seq}")),
            coarse_score: 0.0,
            fine_score: fine,
        })
        .collect();
    hits.sort_by(|a, b| b.fine_score.partial_cmp(&a.fine_score).unwrap().then(a.chunk.id.cmp(&b.chunk.id)));
    let hits = hits_of("q", hits);
    let mapped = map_chunks(&hits, &corpus, MappingOptions::default()).unwrap();
    let got: Vec<(ParagraphId, ChunkId)> =
        mapped.paragraphs.iter().map(|p| (p.clone(), mapped.origin[p].chunk_id.clone())).collect();
    assert_eq!(got, mapping_oracle(&hits));
    assert_eq!(mapped.len(), 6);
    // Tie at 0.88 inside parent 2 goes to the lower seq.
    assert_eq!(mapped.origin[&ps[2].id].chunk_id, ChunkId::new(&ps[2].id, 0));
    assert_eq!(mapped.origin[&ps[4].id].chunk_id, ChunkId::new(&ps[4].id, 2));
}

#[test]
fn corpus_order_sorts_by_corpus_position() {
    let corpus = small_corpus(8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let opts = MappingOptions { order: MappingOrder::CorpusOrder, score: DedupScore::Fine };
    for _ in 0..50 {
        let hits = mapping_fixture(&mut rng, &corpus);
        let mapped = map_chunks(&hits, &corpus, opts).unwrap();
        let positions: Vec<usize> = mapped.paragraphs.iter().map(|p| corpus.position(p).unwrap()).collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
        let mut oracle: Vec<ParagraphId> = mapping_oracle(&hits).into_iter().map(|(p, _)| p).collect();
        oracle.sort_by_key(|p| corpus.position(p));
        assert_eq!(mapped.paragraphs, oracle);
    }
}

#[test]
fn every_parent_appears_once() {
    let corpus = small_corpus(8);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..100 {
        let hits = mapping_fixture(&mut rng, &corpus);
        let mapped = map_chunks(&hits, &corpus, MappingOptions::default()).unwrap();
        let mut parents: Vec<&ParagraphId> = hits.hits.iter().map(|h| &h.chunk.parent_id).collect();
        parents.sort();
        parents.dedup();
        let mut got: Vec<&ParagraphId> = mapped.paragraphs.iter().collect();
        got.sort();
        assert_eq!(got, parents);
    }
}
