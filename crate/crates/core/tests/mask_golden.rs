use pdos_core::{build_layout, tree_mask};

/// Prefix of 3, four branches with titles of 2, 1, 3 and 2 tokens, two
/// body steps with branch 1 finished after the first, then two
/// continuation tokens.
fn grid() -> String {
    let mut layout = build_layout(3, &[2, 1, 3, 2]).unwrap();
    layout.push_step(&[true, true, true, true]).unwrap();
    layout.push_step(&[true, false, true, true]).unwrap();
    layout.push_continuation(2);
    tree_mask(&layout).to_grid()
}

#[test]
fn four_branch_grid_matches_golden() {
    let golden = include_str!("golden/four_branch_mask.txt");
    assert_eq!(grid(), golden);
}
