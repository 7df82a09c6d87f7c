use std::fmt;
use std::net::Ipv6Addr;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

/// Six-byte hardware-style interface address.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct LinkAddress(pub [u8; 6]);

impl LinkAddress {
    pub const BROADCAST: LinkAddress = LinkAddress([0xFF; 6]);

    /// Group bit of the first octet; covers broadcast and multicast.
    pub fn is_group(&self) -> bool {
        self.0[0] & 0x01 != 0
    }

    /// Locally administered unicast address derived from a node name.
    pub fn derived(name: &str) -> Self {
        let digest = Sha256::digest(format!("link:{name}").as_bytes());
        let mut octets = [0u8; 6];
        octets.copy_from_slice(&digest[..6]);
        octets[0] = (octets[0] & 0xFC) | 0x02;
        LinkAddress(octets)
    }
}

impl fmt::Display for LinkAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let o = self.0;
        write!(
            f,
            "{:02x}:{:02x}:{:02x}:{:02x}:{:02x}:{:02x}",
            o[0], o[1], o[2], o[3], o[4], o[5]
        )
    }
}

impl fmt::Debug for LinkAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid address {0:?}")]
pub struct AddressParseError(pub String);

impl FromStr for LinkAddress {
    type Err = AddressParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 6 {
            return Err(AddressParseError(s.to_string()));
        }
        let mut octets = [0u8; 6];
        for (o, p) in octets.iter_mut().zip(parts) {
            if p.len() != 2 {
                return Err(AddressParseError(s.to_string()));
            }
            *o = u8::from_str_radix(p, 16).map_err(|_| AddressParseError(s.to_string()))?;
        }
        Ok(LinkAddress(octets))
    }
}

/// Sixteen-byte network address, rendered in IPv6 notation.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NetAddress(pub Ipv6Addr);

impl NetAddress {
    /// All-nodes link-local multicast group, the broadcast domain for SDP and
    /// neighbor solicitations.
    pub const ALL_NODES: NetAddress = NetAddress(Ipv6Addr::new(0xff02, 0, 0, 0, 0, 0, 0, 1));
    pub const UNSPECIFIED: NetAddress = NetAddress(Ipv6Addr::UNSPECIFIED);

    pub fn from_octets(octets: [u8; 16]) -> Self {
        NetAddress(Ipv6Addr::from(octets))
    }

    pub fn octets(&self) -> [u8; 16] {
        self.0.octets()
    }

    pub fn is_multicast(&self) -> bool {
        self.0.is_multicast()
    }

    /// Link-local address whose interface identifier is derived from a node
    /// name.
    pub fn derived(name: &str) -> Self {
        let digest = Sha256::digest(format!("net:{name}").as_bytes());
        let mut octets = [0u8; 16];
        octets[0] = 0xfe;
        octets[1] = 0x80;
        octets[8..].copy_from_slice(&digest[..8]);
        NetAddress::from_octets(octets)
    }
}

impl fmt::Display for NetAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.0, f)
    }
}

impl fmt::Debug for NetAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.0, f)
    }
}

impl FromStr for NetAddress {
    type Err = AddressParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.parse::<Ipv6Addr>()
            .map(NetAddress)
            .map_err(|_| AddressParseError(s.to_string()))
    }
}

macro_rules! string_serde {
    ($ty:ty) => {
        impl Serialize for $ty {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.collect_str(self)
            }
        }

        impl<'de> Deserialize<'de> for $ty {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

string_serde!(LinkAddress);
string_serde!(NetAddress);

/// Network address plus port.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SockAddr {
    pub net: NetAddress,
    pub port: u16,
}

impl SockAddr {
    pub fn new(net: NetAddress, port: u16) -> Self {
        Self { net, port }
    }
}

impl fmt::Display for SockAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}]:{}", self.net, self.port)
    }
}
