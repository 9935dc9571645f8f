use proptest::prelude::*;
use rwenas::table::{read_table, write_table, TableError};
use rwenas_core::bench::BenchmarkTable;
use rwenas_core::genome::SearchSpace;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn space() -> SearchSpace {
    SearchSpace::micro(true)
}

#[test]
fn empty_input_is_an_empty_table_error() {
    assert!(matches!(read_table("".as_bytes(), &space()), Err(TableError::Empty)));
    assert!(matches!(read_table("genome,accuracy\n".as_bytes(), &space()), Err(TableError::Empty)));
}

#[test]
fn invalid_genome_names_its_line() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let good = space().sample_random(&mut rng);
    let text = format!("genome,accuracy\n\"{good}\",0.5\n\"micro:1,2,3\",0.7\n");
    match read_table(text.as_bytes(), &space()) {
        Err(e @ TableError::Entry { line: 3, .. }) => assert!(e.to_string().starts_with("line 3")),
        other => panic!("expected an entry error on line 3, got {other:?}"),
    }
    let text = format!("genome,accuracy\n\"{good}\",1.5\n");
    assert!(matches!(read_table(text.as_bytes(), &space()), Err(TableError::Entry { line: 2, .. })));
    let text = "genome,accuracy\nnot-a-genome,0.5\n";
    assert!(matches!(read_table(text.as_bytes(), &space()), Err(TableError::Parse { line: 2, .. })));
    let text = format!("genome,accuracy\n\"{good}\",0.5\n\"{good}\",0.6\n");
    assert!(matches!(read_table(text.as_bytes(), &space()), Err(TableError::Duplicate { line: 3, .. })));
    assert!(matches!(read_table("name,acc\nx,1\n".as_bytes(), &space()), Err(TableError::Parse { line: 1, .. })));
}

#[test]
fn export_then_load_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let entries = (0..50).map(|i| (space().sample_random(&mut rng), f64::from(i) / 49.0 * 0.9 + 0.01234567890123));
    let table = BenchmarkTable::from_entries(space(), entries).unwrap();
    let mut bytes = Vec::new();
    write_table(&mut bytes, &table).unwrap();
    let back = read_table(bytes.as_slice(), &space()).unwrap();
    assert_eq!(back, table);
}

proptest! {
    #[test]
    fn any_accuracy_survives_the_csv_round_trip(seed in any::<u64>(), accs in prop::collection::vec(0.0f64..=1.0, 1..30), macro_space in any::<bool>()) {
        let space = if macro_space { SearchSpace::macro_space() } else { space() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut table = BenchmarkTable::new(space.clone());
        for acc in accs {
            let g = space.sample_random(&mut rng);
            if table.get(&g).is_none() {
                table.insert(g, acc).unwrap();
            }
        }
        let mut bytes = Vec::new();
        write_table(&mut bytes, &table).unwrap();
        prop_assert_eq!(read_table(bytes.as_slice(), &space).unwrap(), table);
    }
}
