mod common;

#[test]
fn implanted_flip_is_the_only_flag() {
    common::flips::implanted_flip_is_the_only_flag();
}
