mod common;

#[test]
fn exact_loss_identities() {
    common::loss_identities().unwrap();
}
