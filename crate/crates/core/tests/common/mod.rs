pub mod instance;
pub mod oracle;
