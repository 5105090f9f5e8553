mod common;

use common::criteria::{ranking_hits, RANKING_TRIALS};
use modcomp::scoring::Strategy;

#[test]
fn lexical_scores_find_the_source_domain() {
    for s in [Strategy::TfIdf, Strategy::SentSim] {
        let hits = ranking_hits(s);
        assert!(hits * 10 >= RANKING_TRIALS * 9, "{s}: {hits}/{RANKING_TRIALS}");
    }
}
