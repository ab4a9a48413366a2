use semver::Version;

pub const PROTOCOL_VERSION: &str = "1.0.0";

pub fn protocol_version() -> Version {
    Version::parse(PROTOCOL_VERSION).expect("static version literal")
}
